#pragma once

#include <cstring>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "granvit/rng.hpp"
#include "granvit/tape.hpp"
#include "granvit/tensor.hpp"

namespace granvit {

struct Parameter {
    std::string name;
    Tensor tensor;
    bool trainable = true;
    bool decay_exempt = false;  // layernorm gains/biases and biases skip weight decay
};

// Named parameters with deterministic (name-sorted) iteration order.
class ParameterSet {
public:
    Tensor& add(const std::string& name, Tensor t, bool decay_exempt = false) {
        if (entries_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        Parameter p;
        p.name = name;
        p.tensor = std::move(t);
        p.decay_exempt = decay_exempt;
        auto [it, ok] = entries_.emplace(name, std::move(p));
        (void)ok;
        return it->second.tensor;
    }

    bool contains(const std::string& name) const { return entries_.count(name) > 0; }

    Parameter& param(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    const Parameter& param(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    const Tensor& tensor(const std::string& name) const { return param(name).tensor; }

    std::map<std::string, Parameter>& entries() { return entries_; }
    const std::map<std::string, Parameter>& entries() const { return entries_; }

    std::size_t count() const { return entries_.size(); }

    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& [k, p] : entries_) n += p.tensor.size();
        return n;
    }

    // Marks parameters trainable iff their name starts with one of the
    // prefixes; requires_grad follows the trainable flag.
    void set_trainable_by_prefix(const std::vector<std::string>& prefixes) {
        for (auto& [name, p] : entries_) {
            bool hit = false;
            for (const auto& pre : prefixes)
                hit = hit || std::string_view(name).substr(0, pre.size()) == pre;
            p.trainable = hit;
            p.tensor.set_requires_grad(hit);
        }
    }

    ParameterSet clone() const {
        ParameterSet out;
        for (const auto& [name, p] : entries_) {
            Parameter q;
            q.name = p.name;
            q.tensor = p.tensor.clone(p.tensor.requires_grad());
            q.trainable = p.trainable;
            q.decay_exempt = p.decay_exempt;
            out.entries_.emplace(name, std::move(q));
        }
        return out;
    }

    // Bitwise fingerprint over raw IEEE bytes, in name order.
    std::uint64_t checksum(const std::string& prefix = "") const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](const void* bytes, std::size_t n) {
            const auto* p = static_cast<const unsigned char*>(bytes);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= p[i];
                h *= 0x100000001b3ULL;
            }
        };
        for (const auto& [name, p] : entries_) {
            if (std::string_view(name).substr(0, prefix.size()) != prefix) continue;
            mix(name.data(), name.size());
            mix(p.tensor.data().data(), p.tensor.size() * sizeof(double));
        }
        return h;
    }

private:
    std::map<std::string, Parameter> entries_;
};

// Gradients for every trainable parameter: zeros when the parameter did not
// contribute to the loss; non-trainables are omitted.
inline std::map<std::string, Tensor> backward_params(Tape& tape, const Tensor& loss,
                                                     const ParameterSet& params) {
    BackwardResult res = tape.backward(loss);
    std::map<std::string, Tensor> grads;
    for (const auto& [name, p] : params.entries())
        if (p.trainable) grads.emplace(name, res.grad(p.tensor));
    return grads;
}

}  // namespace granvit

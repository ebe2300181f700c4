#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttp/autograd.hpp"

namespace ttp {

// Named parameter matrices in a fixed insertion order.
template <class S>
class ParamSet {
public:
    using M = ad::Mat<S>;

    void add(const std::string& name, M value) {
        if (index_.contains(name)) {
            throw std::invalid_argument("duplicate parameter " + name);
        }
        index_.emplace(name, values_.size());
        names_.push_back(name);
        values_.push_back(std::move(value));
    }

    bool has(const std::string& name) const { return index_.contains(name); }
    std::size_t index(const std::string& name) const {
        const auto it = index_.find(name);
        if (it == index_.end()) {
            throw std::out_of_range("unknown parameter " + name);
        }
        return it->second;
    }
    const M& at(const std::string& name) const { return values_[index(name)]; }
    M& at(const std::string& name) { return values_[index(name)]; }

    std::size_t size() const { return values_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    const std::vector<M>& values() const { return values_; }
    std::vector<M>& values() { return values_; }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& v : values_) {
            n += static_cast<std::size_t>(v.size());
        }
        return n;
    }

    // Same names and shapes, all zeros.
    ParamSet zeros_like() const {
        ParamSet out;
        for (std::size_t i = 0; i < values_.size(); ++i) {
            out.add(names_[i], M::Zero(values_[i].rows(), values_[i].cols()));
        }
        return out;
    }

    template <class T>
    ParamSet<T> cast() const {
        ParamSet<T> out;
        for (std::size_t i = 0; i < values_.size(); ++i) {
            out.add(names_[i], values_[i].template cast<T>());
        }
        return out;
    }

    bool operator==(const ParamSet& other) const {
        if (names_ != other.names_) {
            return false;
        }
        for (std::size_t i = 0; i < values_.size(); ++i) {
            if (values_[i].rows() != other.values_[i].rows() || values_[i].cols() != other.values_[i].cols() ||
                values_[i] != other.values_[i]) {
                return false;
            }
        }
        return true;
    }

private:
    std::vector<std::string> names_;
    std::vector<M> values_;
    std::map<std::string, std::size_t> index_;
};

// Parameters placed on a tape as leaves, looked up by name.
template <class S>
class BoundParams {
public:
    BoundParams(ad::Tape<S>& tape, const ParamSet<S>& params, bool requires_grad) : tape_(tape), params_(params) {
        vars_.reserve(params.size());
        for (const auto& value : params.values()) {
            vars_.push_back(tape.leaf(value, requires_grad));
        }
    }

    ad::Var operator()(const std::string& name) const { return vars_[params_.index(name)]; }
    ad::Tape<S>& tape() const { return tape_; }
    const ParamSet<S>& params() const { return params_; }
    const std::vector<ad::Var>& vars() const { return vars_; }

    // Gradients after tape.backward(), aligned with the parameter set.
    ParamSet<S> gradients() const {
        ParamSet<S> out;
        for (std::size_t i = 0; i < vars_.size(); ++i) {
            const auto& g = tape_.grad(vars_[i]);
            out.add(params_.names()[i], g.size() == 0 ? ParamSet<S>::M::Zero(params_.values()[i].rows(),
                                                                               params_.values()[i].cols())
                                                      : g);
        }
        return out;
    }

private:
    ad::Tape<S>& tape_;
    const ParamSet<S>& params_;
    std::vector<ad::Var> vars_;
};

}  // namespace ttp

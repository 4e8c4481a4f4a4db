#pragma once

#include "hitrans/tensor.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hitrans {

enum class Component : std::uint8_t { backbone = 0, tr1 = 1, tr2 = 2, decoder = 3 };

inline constexpr std::array<Component, 4> kAllComponents{Component::backbone, Component::tr1, Component::tr2,
                                                          Component::decoder};

std::string_view component_name(Component c);
Component parse_component(std::string_view name);

/// Small bitset over the four trainable components.
class ComponentSet {
  public:
    constexpr ComponentSet() = default;
    constexpr ComponentSet(std::initializer_list<Component> cs) {
        for (Component c : cs) insert(c);
    }
    static constexpr ComponentSet all() {
        return ComponentSet{Component::backbone, Component::tr1, Component::tr2, Component::decoder};
    }

    constexpr void insert(Component c) { bits_ |= bit(c); }
    constexpr bool contains(Component c) const { return (bits_ & bit(c)) != 0; }
    constexpr bool empty() const { return bits_ == 0; }

    std::vector<std::string> names() const;
    static ComponentSet from_names(const std::vector<std::string>& names);

    friend constexpr bool operator==(ComponentSet a, ComponentSet b) { return a.bits_ == b.bits_; }

  private:
    static constexpr std::uint8_t bit(Component c) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(c)); }
    std::uint8_t bits_ = 0;
};

template <typename Scalar>
struct Parameter {
    std::string name;
    Component component = Component::backbone;
    Tensor<Scalar> value;
    /// Running statistics are stored alongside weights but never optimized.
    bool trainable = true;
};

/// Parameters in construction order, addressable by canonical name.
template <typename Scalar>
class ParameterStore {
  public:
    std::size_t add(std::string name, Component component, std::vector<Index> shape, bool trainable = true) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
        const std::size_t id = params_.size();
        index_.emplace(name, id);
        params_.push_back(Parameter<Scalar>{std::move(name), component, Tensor<Scalar>(std::move(shape)), trainable});
        return id;
    }

    std::size_t size() const { return params_.size(); }
    Parameter<Scalar>& operator[](std::size_t i) { return params_[i]; }
    const Parameter<Scalar>& operator[](std::size_t i) const { return params_[i]; }

    std::optional<std::size_t> find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }
    const Tensor<Scalar>& value(const std::string& name) const { return params_.at(index_.at(name)).value; }
    Tensor<Scalar>& value(const std::string& name) { return params_.at(index_.at(name)).value; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    /// Total number of trainable scalars.
    Index trainable_count() const {
        Index n = 0;
        for (const auto& p : params_) {
            if (p.trainable) n += p.value.size();
        }
        return n;
    }

    friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
        if (a.params_.size() != b.params_.size()) return false;
        for (std::size_t i = 0; i < a.params_.size(); ++i) {
            const auto& x = a.params_[i];
            const auto& y = b.params_[i];
            if (x.name != y.name || x.component != y.component || !(x.value == y.value)) return false;
        }
        return true;
    }

  private:
    std::vector<Parameter<Scalar>> params_;
    std::map<std::string, std::size_t> index_;
};

/// Gradient buffers aligned with a ParameterStore.
template <typename Scalar>
class Gradients {
  public:
    Gradients() = default;
    explicit Gradients(const ParameterStore<Scalar>& store) {
        grads_.reserve(store.size());
        for (const auto& p : store) grads_.emplace_back(p.value.shape());
    }
    std::size_t size() const { return grads_.size(); }
    Tensor<Scalar>& operator[](std::size_t i) { return grads_[i]; }
    const Tensor<Scalar>& operator[](std::size_t i) const { return grads_[i]; }
    void set_zero() {
        for (auto& g : grads_) g.set_zero();
    }

  private:
    std::vector<Tensor<Scalar>> grads_;
};

}  // namespace hitrans

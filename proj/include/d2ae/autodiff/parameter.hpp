#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include "d2ae/autodiff/tensor.hpp"

namespace d2ae {

/// The six disjoint parameter groups of the network.
enum class ParamGroup : std::uint8_t { Enc = 0, BranchT = 1, BranchP = 2, ClsT = 3, ClsP = 4, Dec = 5 };

inline constexpr std::array<ParamGroup, 6> kAllGroups = {ParamGroup::Enc,  ParamGroup::BranchT,
                                                         ParamGroup::BranchP, ParamGroup::ClsT,
                                                         ParamGroup::ClsP, ParamGroup::Dec};

inline std::string_view group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::Enc: return "ENC";
        case ParamGroup::BranchT: return "BRANCH_T";
        case ParamGroup::BranchP: return "BRANCH_P";
        case ParamGroup::ClsT: return "CLS_T";
        case ParamGroup::ClsP: return "CLS_P";
        case ParamGroup::Dec: return "DEC";
    }
    return "?";
}

inline ParamGroup group_from_tag(std::uint8_t tag) {
    if (tag > 5) throw std::invalid_argument("unknown parameter group tag " + std::to_string(tag));
    return static_cast<ParamGroup>(tag);
}

/// Small set of parameter groups; the unit of gradient routing.
class GroupSet {
public:
    constexpr GroupSet() = default;
    constexpr GroupSet(std::initializer_list<ParamGroup> groups) {
        for (auto g : groups) bits_ |= bit(g);
    }

    static constexpr GroupSet all() {
        GroupSet s;
        s.bits_ = 0x3F;
        return s;
    }

    constexpr bool contains(ParamGroup g) const { return (bits_ & bit(g)) != 0; }
    constexpr GroupSet with(ParamGroup g) const {
        GroupSet s = *this;
        s.bits_ |= bit(g);
        return s;
    }
    constexpr GroupSet without(ParamGroup g) const {
        GroupSet s = *this;
        s.bits_ &= static_cast<std::uint8_t>(~bit(g));
        return s;
    }
    constexpr bool empty() const { return bits_ == 0; }
    constexpr bool operator==(const GroupSet&) const = default;

private:
    static constexpr std::uint8_t bit(ParamGroup g) {
        return static_cast<std::uint8_t>(1u << static_cast<unsigned>(g));
    }
    std::uint8_t bits_ = 0;
};

/// A learnable tensor with its gradient accumulator. The group is fixed at construction.
template <typename T>
class Parameter {
public:
    Parameter(std::string name, ParamGroup group, Tensor<T> value)
        : name_(std::move(name)), group_(group), value(std::move(value)) {
        grad = Tensor<T>::zeros_like(this->value);
    }

    const std::string& name() const noexcept { return name_; }
    ParamGroup group() const noexcept { return group_; }
    void zero_grad() { grad.fill(T{0}); }

private:
    std::string name_;
    ParamGroup group_;

public:
    Tensor<T> value;
    Tensor<T> grad;
};

}  // namespace d2ae

#include "hitrans/parameters.hpp"

#include <stdexcept>

namespace hitrans {

std::string_view component_name(Component c) {
    switch (c) {
        case Component::backbone: return "backbone";
        case Component::tr1: return "tr1";
        case Component::tr2: return "tr2";
        case Component::decoder: return "decoder";
    }
    return "unknown";
}

Component parse_component(std::string_view name) {
    for (Component c : kAllComponents) {
        if (component_name(c) == name) return c;
    }
    throw std::invalid_argument("unknown component '" + std::string(name) + "'");
}

std::vector<std::string> ComponentSet::names() const {
    std::vector<std::string> out;
    for (Component c : kAllComponents) {
        if (contains(c)) out.emplace_back(component_name(c));
    }
    return out;
}

ComponentSet ComponentSet::from_names(const std::vector<std::string>& names) {
    ComponentSet s;
    for (const auto& n : names) s.insert(parse_component(n));
    return s;
}

}  // namespace hitrans

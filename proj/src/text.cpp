#include "xmod/text.hpp"

#include <charconv>
#include <stdexcept>
#include <system_error>

#include "xmod/tensor.hpp"

namespace xmod {

std::string shape_str(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    if (res.ec != std::errc{}) throw std::runtime_error("format_double failed");
    return std::string(buf, res.ptr);
}

double parse_double(std::string_view text, std::string_view what) {
    double v = 0.0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
        throw std::invalid_argument("invalid number '" + std::string(text) + "' in " + std::string(what));
    }
    return v;
}

long long parse_int(std::string_view text, std::string_view what) {
    long long v = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
        throw std::invalid_argument("invalid integer '" + std::string(text) + "' in " + std::string(what));
    }
    return v;
}

std::vector<std::string> split(std::string_view text, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = text.find(sep, start);
        out.emplace_back(text.substr(start, pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::map<std::string, double> parse_key_values(std::string_view text, std::string_view what) {
    std::map<std::string, double> out;
    if (text.empty()) return out;
    for (const auto& item : split(text, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw std::invalid_argument("expected key=value, got '" + item + "' in " + std::string(what));
        }
        const std::string key = item.substr(0, eq);
        if (!out.emplace(key, parse_double(std::string_view(item).substr(eq + 1), what)).second) {
            throw std::invalid_argument("duplicate key '" + key + "' in " + std::string(what));
        }
    }
    return out;
}

}  // namespace xmod

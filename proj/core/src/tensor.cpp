#include "cmrc/tensor.hpp"

namespace cmrc {

std::string shape_to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    out += "]";
    return out;
}

namespace detail {

std::uint64_t next_tape_epoch() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

} // namespace detail

} // namespace cmrc

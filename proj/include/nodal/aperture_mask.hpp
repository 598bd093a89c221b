#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace nodal {

// The probe-head input nodes left unsilenced; every other feature coordinate is zeroed.
class ApertureMask {
public:
    enum class Kind { full, single_head, heads, random_subset, explicit_list };

    static ApertureMask full(std::size_t width) {
        std::vector<std::size_t> all(width);
        std::iota(all.begin(), all.end(), std::size_t{0});
        return ApertureMask(Kind::full, width, std::move(all), "full");
    }

    static ApertureMask single_head(std::size_t width, std::size_t head_width, std::size_t head) {
        if (head_width == 0 || width % head_width != 0) throw ApertureError("width is not a multiple of head_width");
        if (head >= width / head_width)
            throw ApertureError("head " + std::to_string(head) + " out of range");
        std::vector<std::size_t> kept(head_width);
        std::iota(kept.begin(), kept.end(), head * head_width);
        return ApertureMask(Kind::single_head, width, std::move(kept), "head(" + std::to_string(head) + ")");
    }

    // Union of the column blocks of several heads.
    static ApertureMask heads(std::size_t width, std::size_t head_width, const std::vector<std::size_t>& heads) {
        if (head_width == 0 || width % head_width != 0) throw ApertureError("width is not a multiple of head_width");
        std::vector<std::size_t> kept;
        std::string desc = "heads(";
        for (std::size_t i = 0; i < heads.size(); ++i) {
            if (heads[i] >= width / head_width)
                throw ApertureError("head " + std::to_string(heads[i]) + " out of range");
            for (std::size_t c = 0; c < head_width; ++c) kept.push_back(heads[i] * head_width + c);
            desc += (i ? "+" : "") + std::to_string(heads[i]);
        }
        std::sort(kept.begin(), kept.end());
        if (std::adjacent_find(kept.begin(), kept.end()) != kept.end()) throw ApertureError("duplicate head");
        return ApertureMask(Kind::heads, width, std::move(kept), desc + ")");
    }

    // n indices drawn without replacement, reproducibly from seed.
    static ApertureMask random_subset(std::size_t width, std::size_t n, std::uint64_t seed) {
        if (n > width)
            throw ApertureError("aperture size " + std::to_string(n) + " exceeds width " + std::to_string(width));
        std::vector<std::size_t> all(width);
        std::iota(all.begin(), all.end(), std::size_t{0});
        Rng rng(derive_seed(seed, 0xa9e));
        for (std::size_t i = 0; i < n; ++i) {
            const auto j = i + static_cast<std::size_t>(rng.below(width - i));
            std::swap(all[i], all[j]);
        }
        all.resize(n);
        std::sort(all.begin(), all.end());
        return ApertureMask(Kind::random_subset, width, std::move(all),
                            "random(n=" + std::to_string(n) + ",seed=" + std::to_string(seed) + ")");
    }

    static ApertureMask explicit_list(std::size_t width, std::vector<std::size_t> kept) {
        std::sort(kept.begin(), kept.end());
        if (std::adjacent_find(kept.begin(), kept.end()) != kept.end())
            throw ApertureError("duplicate aperture index");
        if (!kept.empty() && kept.back() >= width)
            throw ApertureError("aperture index " + std::to_string(kept.back()) + " out of range");
        std::string desc = "explicit(";
        for (std::size_t i = 0; i < kept.size(); ++i) desc += (i ? "," : "") + std::to_string(kept[i]);
        return ApertureMask(Kind::explicit_list, width, std::move(kept), desc + ")");
    }

    const std::vector<std::size_t>& kept() const { return kept_; }
    std::size_t size() const { return kept_.size(); }
    std::size_t width() const { return width_; }
    Kind kind() const { return kind_; }
    const std::string& description() const { return description_; }
    bool is_full() const { return kept_.size() == width_; }

    bool contains(std::size_t index) const { return std::binary_search(kept_.begin(), kept_.end(), index); }

private:
    ApertureMask(Kind kind, std::size_t width, std::vector<std::size_t> kept, std::string description)
        : kind_(kind), width_(width), kept_(std::move(kept)), description_(std::move(description)) {}

    Kind kind_;
    std::size_t width_;
    std::vector<std::size_t> kept_;
    std::string description_;
};

}  // namespace nodal

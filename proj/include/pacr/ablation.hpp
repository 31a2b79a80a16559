#pragma once

#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "pacr/matcher.hpp"
#include "pacr/metrics.hpp"

namespace pacr {

struct VariantSpec {
    std::string label;
    MatcherConfig config;
};

/// Positional-encoding comparison rows: none, raw coordinates, raw
/// coordinates with alternate refinement, directional vectors (the method).
inline std::vector<VariantSpec> positional_encoding_variants(const MatcherConfig& base) {
    std::vector<VariantSpec> out;
    {
        MatcherConfig c = base;
        c.positional = PositionalMode::none;
        out.push_back({"no-PE", c});
    }
    {
        MatcherConfig c = base;
        c.positional = PositionalMode::coords;
        c.alternate_refinement = false;
        out.push_back({"coords-PE", c});
    }
    {
        MatcherConfig c = base;
        c.positional = PositionalMode::coords;
        c.alternate_refinement = true;
        out.push_back({"coords-PE-refine", c});
    }
    {
        MatcherConfig c = base;
        c.positional = PositionalMode::directional;
        c.alternate_refinement = true;
        out.push_back({"directional-PE", c});
    }
    return out;
}

/// Matching-stage rows: no PAC, points only, superpoints only, both.
inline std::vector<VariantSpec> stage_variants(const MatcherConfig& base) {
    std::vector<VariantSpec> out;
    {
        MatcherConfig c = base;
        c.positional = PositionalMode::none;
        out.push_back({"pac-none", c});
    }
    {
        MatcherConfig c = base;
        c.positional = PositionalMode::directional;
        c.pac_on_superpoints = false;
        c.pac_on_points = true;
        out.push_back({"pac-points-only", c});
    }
    {
        MatcherConfig c = base;
        c.positional = PositionalMode::directional;
        c.pac_on_superpoints = true;
        c.pac_on_points = false;
        out.push_back({"pac-superpoints-only", c});
    }
    {
        MatcherConfig c = base;
        c.positional = PositionalMode::directional;
        out.push_back({"pac-both", c});
    }
    return out;
}

/// Plain-text AR table in the object-column layout of the evaluation harness.
inline std::string render_ar_table(const std::vector<EvalReport>& reports) {
    std::vector<std::string> objects;
    for (const auto& rep : reports)
        for (const auto& inst : rep.instances) {
            bool known = false;
            for (const auto& o : objects) known |= (o == inst.object);
            if (!known) objects.push_back(inst.object);
        }

    std::ostringstream os;
    os << std::left << std::setw(24) << "variant";
    for (const auto& o : objects) os << std::right << std::setw(12) << o;
    os << std::right << std::setw(12) << "mean" << "\n";
    os << std::string(24 + 12 * (objects.size() + 1), '-') << "\n";
    for (const auto& rep : reports) {
        os << std::left << std::setw(24) << rep.variant;
        if (rep.instances.empty()) {
            os << "  (absent)\n";
            continue;
        }
        const RecallSummary summary = average_recall(rep);
        for (const auto& o : objects) {
            os << std::right << std::setw(12);
            auto it = summary.per_object.find(o);
            if (it == summary.per_object.end())
                os << "-";
            else
                os << std::fixed << std::setprecision(1) << it->second;
        }
        os << std::right << std::setw(12) << std::fixed << std::setprecision(1)
           << summary.mean << "\n";
    }
    return os.str();
}

}  // namespace pacr

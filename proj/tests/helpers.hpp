#pragma once

#include <string>
#include <vector>

#include "vsens/engine.hpp"
#include "vsens/model.hpp"
#include "vsens/rng.hpp"
#include "vsens/series.hpp"
#include "vsens/tokenizer.hpp"

namespace vsens::testing {

inline series_family blank_family(std::size_t m, std::size_t n, std::size_t samples = 1) {
    series_family fam;
    for (std::size_t i = 0; i < m; ++i) {
        fam.names.push_back("z" + std::to_string(i + 1));
        fam.roles.push_back(series_role::input);
    }
    for (std::size_t j = 0; j < n; ++j) {
        fam.names.push_back("v" + std::to_string(j + 1));
        fam.roles.push_back(series_role::virtual_sensor);
    }
    fam.samples = samples;
    fam.values.assign(samples * (m + n), 0.0);
    return fam;
}

// window of iid standard-normal samples (already "normalized")
inline series_window random_window(std::size_t slots, std::size_t patch_len, std::size_t cols,
                                   rng& gen) {
    series_window w;
    w.len = slots * patch_len;
    w.cols = cols;
    w.values.resize(w.len * cols);
    for (auto& v : w.values) v = gen.normal();
    return w;
}

template <class T>
model_params<T> toy_model(std::size_t m, std::size_t n, model_config cfg, std::uint64_t seed = 1) {
    rng gen = rng::stream(seed, "init");
    return model_params<T>::init(cfg, m, n, gen);
}

// ground-truth sequence over `universe` covering slots 1..slots (no
// prototypes), for forward-equivalence style checks
template <class T>
patch_sequence<T> full_sequence(model_params<T>& params, const family_layout& layout,
                                const series_window& win, const std::vector<std::size_t>& universe,
                                std::size_t slots) {
    std::vector<token_spec<T>> specs;
    for (auto var : universe)
        for (std::size_t slot = 1; slot <= slots; ++slot) {
            token_spec<T> sp;
            sp.variate = var;
            sp.slot = slot;
            sp.patch = win.patch(slot, var, params.cfg.patch_len);
            specs.push_back(std::move(sp));
        }
    return assemble_sequence(params.emb, layout, std::move(specs), params.cfg.patch_len);
}

} // namespace vsens::testing

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "vsens/model.hpp"
#include "vsens/optim.hpp"
#include "vsens/relevance.hpp"
#include "vsens/series.hpp"
#include "vsens/tensor.hpp"
#include "vsens/tokenizer.hpp"

namespace vsens {

struct train_config {
    std::size_t n_train = 1;     // sensors sampled per iteration
    std::size_t batch_size = 8;
    std::size_t epochs = 80;
    std::size_t patience = 9;    // early stopping, epochs past the best
    std::uint64_t seed = 2025;
    lr_schedule lr;
    double dropout = 0.0;
    double train_fraction = 0.8;
    window_spec window;
    // from this epoch on, training sequences are pruned to the union input
    // sets at `sparsify_threshold`; negative disables sparsified training
    long long sparsify_epoch = -1;
    double sparsify_threshold = -std::numeric_limits<double>::infinity();
};

struct forecast_request {
    std::vector<std::size_t> sensors;  // 0-based sensor ids
    std::size_t context_slots = 2;     // c
    std::size_t cycles = 6;            // K
    double threshold = -std::numeric_limits<double>::infinity();

    void validate(std::size_t n) const {
        if (sensors.empty()) throw std::invalid_argument("forecast_request: no sensors selected");
        if (cycles < 1) throw std::invalid_argument("forecast_request: cycles must be >= 1");
        if (context_slots < 1) throw std::invalid_argument("forecast_request: context must be >= 1");
        for (auto j : sensors)
            if (j >= n)
                throw std::invalid_argument("forecast_request: sensor " + std::to_string(j) +
                                            " out of " + std::to_string(n));
    }
};

struct forecast_result {
    std::vector<std::size_t> sensors;
    std::vector<std::vector<double>> predictions;  // per sensor, cycles*p normalized samples
    std::vector<double> mse_per_sensor;            // normalized space
    std::vector<std::size_t> tokens_per_cycle;
    std::size_t context_slots = 0;
    std::size_t cycles = 0;
    std::size_t patch_len = 0;
};

struct epoch_metrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double learning_rate = 0.0;
    double seconds = 0.0;
};

struct train_result {
    std::vector<epoch_metrics> history;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
};

// Uniform sensor subset without replacement, ascending.
inline std::vector<std::size_t> sample_subset(std::size_t n, std::size_t n_train, rng& gen) {
    if (n_train > n)
        throw std::invalid_argument("sample_subset: n_train " + std::to_string(n_train) +
                                    " exceeds " + std::to_string(n));
    auto s = gen.sample_without_replacement(n, n_train);
    std::sort(s.begin(), s.end());
    return s;
}

namespace detail {

template <class T>
std::vector<std::size_t> request_universe(model_params<T>& params, const family_layout& layout,
                                          const std::vector<std::size_t>& sensors,
                                          double threshold) {
    std::vector<input_set> sets;
    sets.reserve(sensors.size());
    for (auto j : sensors) sets.push_back(sparsify(params.relevance, layout, j, threshold));
    return union_variates(sets);
}

inline std::vector<std::size_t> all_variates(const family_layout& layout) {
    std::vector<std::size_t> u(layout.num_variates());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = i;
    return u;
}

template <class T>
std::vector<T> patch_values(const series_window& win, std::size_t slot, std::size_t col,
                            std::size_t p) {
    const auto d = win.patch(slot, col, p);
    return std::vector<T>(d.begin(), d.end());
}

} // namespace detail

// ---------------------------------------------------------------------------
// teacher forcing
// ---------------------------------------------------------------------------

// Loss over the virtual-sensor tokens of the requested sensors only: each of
// their tokens at slot t (prototypes included) predicts the ground-truth
// patch t+1 under forecast decoding, or its own patch t under nowcast
// decoding. Input-signal rows of `outputs` never enter the loss.
template <class T>
tensor<T> virtual_forecast_loss(const tensor<T>& outputs, const patch_sequence<T>& seq,
                                const series_window& win, const family_layout& layout,
                                const std::vector<std::size_t>& sensors, std::size_t patch_len,
                                decoding_mode decoding = decoding_mode::forecast) {
    const std::size_t ahead = decoding == decoding_mode::forecast ? 1 : 0;
    std::vector<std::size_t> positions;
    std::vector<T> targets;
    for (auto j : sensors) {
        const std::size_t var = layout.virtual_column.at(j);
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (seq.variate_of[i] != var) continue;
            const auto target = win.patch(seq.slot_of[i] + ahead, var, patch_len);
            positions.push_back(i);
            targets.insert(targets.end(), target.begin(), target.end());
        }
    }
    if (positions.empty())
        throw std::invalid_argument("virtual_forecast_loss: no virtual tokens for requested sensors");
    tensor<T> pred = gather_rows(outputs, positions);
    tensor<T> tgt = tensor<T>::from({positions.size(), patch_len}, std::move(targets));
    return mse(pred, tgt);
}

// Slots a teacher-forcing sequence covers: under forecast decoding the
// window's final patch is a prediction target only.
template <class T>
std::size_t tf_content_slots(const model_params<T>& params, const series_window& win) {
    const std::size_t slots = win.len / params.cfg.patch_len;
    return params.cfg.decoding == decoding_mode::forecast ? slots - 1 : slots;
}

// Builds the teacher-forcing sequence of one window over `universe`: ground
// truth everywhere, except that each requested sensor's token at its sampled
// slot is replaced by an empty prototype.
template <class T>
patch_sequence<T> teacher_forcing_sequence(model_params<T>& params, const family_layout& layout,
                                           const series_window& win,
                                           const std::vector<std::size_t>& universe,
                                           const std::vector<std::size_t>& sensors,
                                           const std::vector<std::size_t>& proto_slots) {
    const std::size_t p = params.cfg.patch_len;
    const std::size_t content_slots = tf_content_slots(params, win);
    if (content_slots < 1) throw std::invalid_argument("teacher_forcing_sequence: window too short");

    constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::vector<std::size_t> proto_slot_of(layout.num_variates(), npos);
    for (std::size_t i = 0; i < sensors.size(); ++i)
        proto_slot_of[layout.virtual_column.at(sensors[i])] = proto_slots.at(i);

    std::vector<token_spec<T>> specs;
    specs.reserve(universe.size() * content_slots);
    for (auto var : universe) {
        for (std::size_t slot = 1; slot <= content_slots; ++slot) {
            token_spec<T> sp;
            sp.variate = var;
            sp.slot = slot;
            if (proto_slot_of[var] == slot) {
                sp.what = token_spec<T>::kind::prototype;
            } else {
                sp.what = token_spec<T>::kind::ground_truth;
                sp.patch = win.patch(slot, var, p);
            }
            specs.push_back(std::move(sp));
        }
    }
    return assemble_sequence(params.emb, layout, std::move(specs), p);
}

// One teacher-forcing optimizer step over a batch of windows: a single
// forward pass per window, MSE on the requested sensors' forecasts only,
// then backward and Adam.
template <class T>
double teacher_forcing_step(model_params<T>& params, const family_layout& layout,
                            const std::vector<const series_window*>& batch,
                            const std::vector<std::size_t>& sensors, adam_state& opt, double lr,
                            rng& proto_rng, const std::vector<std::size_t>& universe,
                            const dropout_ctx& dc = {}) {
    if (batch.empty()) throw std::invalid_argument("teacher_forcing_step: empty batch");
    auto params_list = params.parameters();
    zero_grads(params_list);
    tensor<T> total;
    for (const auto* win : batch) {
        const std::size_t content_slots = tf_content_slots(params, *win);
        std::vector<std::size_t> proto_slots;
        proto_slots.reserve(sensors.size());
        for (std::size_t i = 0; i < sensors.size(); ++i)
            proto_slots.push_back(1 + proto_rng.below(content_slots));
        auto seq = teacher_forcing_sequence(params, layout, *win, universe, sensors, proto_slots);
        tensor<T> bias = combined_bias(params.relevance, sensors, seq.variate_of);
        tensor<T> out = model_forward(params, seq, bias, nullptr, dc);
        tensor<T> loss =
            scale(virtual_forecast_loss(out, seq, *win, layout, sensors, params.cfg.patch_len,
                                        params.cfg.decoding),
                  T(1) / T(batch.size()));
        total = total.defined() ? add(total, loss) : loss;
    }
    const double value = static_cast<double>(total.data()[0]);
    backward(total);
    adam_step(params_list, opt, lr);
    return value;
}

// Teacher-forcing loss of a window set without touching the optimizer;
// prototype slots are drawn from `proto_seed` so the quantity is comparable
// across epochs.
template <class T>
double validation_loss(model_params<T>& params, const family_layout& layout,
                       const std::vector<series_window>& windows,
                       const std::vector<std::size_t>& sensors,
                       const std::vector<std::size_t>& universe, std::uint64_t proto_seed) {
    if (windows.empty()) throw std::invalid_argument("validation_loss: no windows");
    no_grad_guard ng;
    rng proto_rng = rng::stream(proto_seed, "val-proto");
    double total = 0.0;
    for (const auto& win : windows) {
        const std::size_t content_slots = tf_content_slots(params, win);
        std::vector<std::size_t> proto_slots;
        for (std::size_t i = 0; i < sensors.size(); ++i)
            proto_slots.push_back(1 + proto_rng.below(content_slots));
        auto seq = teacher_forcing_sequence(params, layout, win, universe, sensors, proto_slots);
        tensor<T> bias = combined_bias(params.relevance, sensors, seq.variate_of);
        tensor<T> out = model_forward(params, seq, bias);
        total += static_cast<double>(
            virtual_forecast_loss(out, seq, win, layout, sensors, params.cfg.patch_len,
                                  params.cfg.decoding)
                .data()[0]);
    }
    return total / static_cast<double>(windows.size());
}

// ---------------------------------------------------------------------------
// autoregressive generation (shared by BPTT training and inference)
// ---------------------------------------------------------------------------

namespace detail {

// Runs `cycles` autoregressive cycles over one window. Under forecast
// decoding, cycle 1 sees input context for slots 1..c and one empty
// prototype per requested sensor at slot c whose output is the patch c+1
// prediction; later cycles append ground-truth context at the next slot and
// the previous predictions as the sensors' token content, reading the next
// prediction at the newest token. Under nowcast decoding the prototype sits
// at the newest slot c+k alongside the concurrent inputs and predicts that
// slot; earlier prototypes are replaced by the fed-back predictions.
// Returns per-cycle predicted rows (tape tensors when feedback is not
// detached).
template <class T>
struct cycle_outputs {
    std::vector<std::vector<tensor<T>>> predictions;  // [cycle][sensor] 1 x p
    std::vector<std::size_t> tokens_per_cycle;
};

enum class feedback_mode {
    model_predictions,  // autoregressive: previous prediction as new input
    ground_truth,       // oracle mode: feed ground truth instead of predictions
};

template <class T>
cycle_outputs<T> run_cycles(model_params<T>& params, const family_layout& layout,
                            const series_window& win, const std::vector<std::size_t>& sensors,
                            std::size_t context_slots, std::size_t cycles,
                            const std::vector<std::size_t>& universe, bool detach_feedback,
                            const dropout_ctx& dc = {},
                            feedback_mode feedback = feedback_mode::model_predictions) {
    const std::size_t p = params.cfg.patch_len;
    const std::size_t c = context_slots;
    const bool nowcast = params.cfg.decoding == decoding_mode::nowcast;
    if (win.len < (c + cycles) * p)
        throw std::invalid_argument("run_cycles: window of " + std::to_string(win.len / p) +
                                    " slots cannot cover context " + std::to_string(c) + " + " +
                                    std::to_string(cycles) + " cycles");
    std::vector<std::size_t> sensor_vars;
    for (auto j : sensors) sensor_vars.push_back(layout.virtual_column.at(j));

    cycle_outputs<T> out;
    out.predictions.resize(cycles);

    for (std::size_t k = 1; k <= cycles; ++k) {
        // requested sensors have no measured history: context variates cover
        // every slot, sensors appear only as predictions plus one prototype
        std::vector<token_spec<T>> specs;
        const std::size_t newest = nowcast ? c + k : c + k - 1;
        for (auto var : universe) {
            if (std::find(sensor_vars.begin(), sensor_vars.end(), var) != sensor_vars.end())
                continue;
            for (std::size_t slot = 1; slot <= newest; ++slot) {
                token_spec<T> sp;
                sp.variate = var;
                sp.slot = slot;
                sp.what = token_spec<T>::kind::ground_truth;
                sp.patch = win.patch(slot, var, p);
                specs.push_back(std::move(sp));
            }
        }
        const std::size_t proto_slot = nowcast ? c + k : c;
        for (std::size_t si = 0; si < sensor_vars.size(); ++si) {
            token_spec<T> proto;
            proto.variate = sensor_vars[si];
            proto.slot = proto_slot;
            proto.what = token_spec<T>::kind::prototype;
            specs.push_back(std::move(proto));
            for (std::size_t back = 1; back < k; ++back) {
                token_spec<T> sp;
                sp.variate = sensor_vars[si];
                sp.slot = c + back;
                if (feedback == feedback_mode::ground_truth) {
                    sp.what = token_spec<T>::kind::ground_truth;
                    sp.patch = win.patch(sp.slot, sensor_vars[si], p);
                } else {
                    sp.what = token_spec<T>::kind::tensor_content;
                    tensor<T> prev = out.predictions[back - 1][si];
                    sp.content = detach_feedback ? prev.detach() : prev;
                }
                specs.push_back(std::move(sp));
            }
        }
        auto seq = assemble_sequence(params.emb, layout, specs, p);
        tensor<T> bias = combined_bias(params.relevance, sensors, seq.variate_of);
        tensor<T> outputs = model_forward(params, seq, bias, nullptr, dc);
        out.tokens_per_cycle.push_back(seq.size());
        const std::size_t read_slot = nowcast ? c + k : (k == 1 ? c : c + k - 1);
        for (std::size_t si = 0; si < sensor_vars.size(); ++si) {
            const std::size_t pos = seq.find(sensor_vars[si], read_slot);
            if (pos == static_cast<std::size_t>(-1))
                throw std::runtime_error("run_cycles: lost track of sensor token");
            out.predictions[k - 1].push_back(gather_rows(outputs, {pos}));
        }
    }
    return out;
}

} // namespace detail

// One BPTT step: K autoregressive cycles per window with predictions fed
// back on the tape, summed MSE over all K predicted patches, gradients
// through the full recurrent path. `detach_feedback` cuts that path (used by
// the oracle that shows the recurrent contribution is real).
template <class T>
double bptt_finetune_step(model_params<T>& params, const family_layout& layout,
                          const std::vector<const series_window*>& batch,
                          const std::vector<std::size_t>& sensors, adam_state& opt, double lr,
                          std::size_t context_slots, std::size_t cycles,
                          const std::vector<std::size_t>& universe, bool detach_feedback = false,
                          bool apply_update = true, const dropout_ctx& dc = {}) {
    if (batch.empty()) throw std::invalid_argument("bptt_finetune_step: empty batch");
    const std::size_t p = params.cfg.patch_len;
    auto params_list = params.parameters();
    zero_grads(params_list);
    tensor<T> total;
    for (const auto* win : batch) {
        auto cyc = detail::run_cycles(params, layout, *win, sensors, context_slots, cycles, universe,
                                      detach_feedback, dc);
        tensor<T> window_loss;
        for (std::size_t k = 1; k <= cycles; ++k) {
            std::vector<T> targets;
            for (auto j : sensors) {
                const auto t = win->patch(context_slots + k, layout.virtual_column.at(j), p);
                targets.insert(targets.end(), t.begin(), t.end());
            }
            tensor<T> pred = cyc.predictions[k - 1].size() == 1
                                 ? cyc.predictions[k - 1][0]
                                 : concat_rows(cyc.predictions[k - 1]);
            tensor<T> cycle_loss = mse(pred, tensor<T>::from({sensors.size(), p}, std::move(targets)));
            window_loss = window_loss.defined() ? add(window_loss, cycle_loss) : cycle_loss;
        }
        window_loss = scale(window_loss, T(1) / T(batch.size()));
        total = total.defined() ? add(total, window_loss) : window_loss;
    }
    const double value = static_cast<double>(total.data()[0]);
    backward(total);
    if (apply_update) adam_step(params_list, opt, lr);
    return value;
}

// Selective autoregressive inference: predictions for slots c+1..c+K of the
// requested sensors, restricted to the union input set at the request's
// threshold. Per-sensor MSE is reported in normalized space.
template <class T>
forecast_result autoregressive_forecast(model_params<T>& params, const family_layout& layout,
                                        const series_window& win, const forecast_request& req) {
    req.validate(params.n);
    no_grad_guard ng;
    const std::size_t p = params.cfg.patch_len;
    const auto universe = detail::request_universe(params, layout, req.sensors, req.threshold);
    auto cyc = detail::run_cycles(params, layout, win, req.sensors, req.context_slots, req.cycles,
                                  universe, true);
    forecast_result res;
    res.sensors = req.sensors;
    res.context_slots = req.context_slots;
    res.cycles = req.cycles;
    res.patch_len = p;
    res.tokens_per_cycle = cyc.tokens_per_cycle;
    res.predictions.assign(req.sensors.size(), {});
    res.mse_per_sensor.assign(req.sensors.size(), 0.0);
    for (std::size_t si = 0; si < req.sensors.size(); ++si) {
        auto& series = res.predictions[si];
        double err = 0.0;
        for (std::size_t k = 1; k <= req.cycles; ++k) {
            const tensor<T>& pred = cyc.predictions[k - 1][si];
            const auto target =
                win.patch(req.context_slots + k, layout.virtual_column.at(req.sensors[si]), p);
            for (std::size_t i = 0; i < p; ++i) {
                const double pv = static_cast<double>(pred.data()[i]);
                series.push_back(pv);
                const double d = pv - target[i];
                err += d * d;
            }
        }
        res.mse_per_sensor[si] = err / static_cast<double>(req.cycles * p);
    }
    return res;
}

struct eval_report {
    std::vector<std::size_t> sensors;
    std::vector<double> mse_per_sensor;
    double mse_mean = 0.0;
    std::size_t windows = 0;
    std::vector<std::size_t> tokens_per_cycle;
    double sparsity = 0.0;
};

// Mean autoregressive MSE per sensor over evaluation windows.
template <class T>
eval_report evaluate(model_params<T>& params, const family_layout& layout,
                     const std::vector<series_window>& windows, const forecast_request& req) {
    if (windows.empty()) throw std::invalid_argument("evaluate: no windows");
    eval_report rep;
    rep.sensors = req.sensors;
    rep.windows = windows.size();
    rep.mse_per_sensor.assign(req.sensors.size(), 0.0);
    for (const auto& win : windows) {
        auto res = autoregressive_forecast(params, layout, win, req);
        for (std::size_t si = 0; si < req.sensors.size(); ++si)
            rep.mse_per_sensor[si] += res.mse_per_sensor[si];
        rep.tokens_per_cycle = res.tokens_per_cycle;
    }
    for (auto& v : rep.mse_per_sensor) v /= static_cast<double>(windows.size());
    double total = 0.0;
    for (auto v : rep.mse_per_sensor) total += v;
    rep.mse_mean = total / static_cast<double>(rep.mse_per_sensor.size());
    rep.sparsity = sparsity_of(
        detail::request_universe(params, layout, req.sensors, req.threshold).size(),
        layout.num_variates());
    return rep;
}

// Per-sensor evaluation with explicit input sets (one per requested sensor):
// sensor j is forecast alone from exactly its own set. Used by the relevance
// method comparison, where learned/correlation/random sets are swapped in at
// matched sparsity.
template <class T>
eval_report evaluate_with_sets(model_params<T>& params, const family_layout& layout,
                               const std::vector<series_window>& windows, std::size_t context_slots,
                               std::size_t cycles, const std::vector<input_set>& sets) {
    if (windows.empty()) throw std::invalid_argument("evaluate_with_sets: no windows");
    if (sets.empty()) throw std::invalid_argument("evaluate_with_sets: no sets");
    no_grad_guard ng;
    eval_report rep;
    rep.windows = windows.size();
    double sparsity_sum = 0.0;
    for (const auto& set : sets) {
        rep.sensors.push_back(set.sensor);
        double err = 0.0;
        for (const auto& win : windows) {
            auto cyc = detail::run_cycles(params, layout, win, {set.sensor}, context_slots, cycles,
                                          set.variates, true);
            const std::size_t p = params.cfg.patch_len;
            double werr = 0.0;
            for (std::size_t k = 1; k <= cycles; ++k) {
                const auto target =
                    win.patch(context_slots + k, layout.virtual_column.at(set.sensor), p);
                const tensor<T>& pred = cyc.predictions[k - 1][0];
                for (std::size_t i = 0; i < p; ++i) {
                    const double d = static_cast<double>(pred.data()[i]) - target[i];
                    werr += d * d;
                }
            }
            err += werr / static_cast<double>(cycles * p);
            rep.tokens_per_cycle = cyc.tokens_per_cycle;
        }
        rep.mse_per_sensor.push_back(err / static_cast<double>(windows.size()));
        sparsity_sum += sparsity_of(set.variates.size(), layout.num_variates());
    }
    double total = 0.0;
    for (auto v : rep.mse_per_sensor) total += v;
    rep.mse_mean = total / static_cast<double>(rep.mse_per_sensor.size());
    rep.sparsity = sparsity_sum / static_cast<double>(sets.size());
    return rep;
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
std::vector<std::pair<std::string, std::vector<T>>> snapshot_params(model_params<T>& p) {
    std::vector<std::pair<std::string, std::vector<T>>> out;
    for (auto& [name, t] : p.parameters()) out.emplace_back(name, t->values());
    return out;
}

template <class T>
void restore_params(model_params<T>& p, const std::vector<std::pair<std::string, std::vector<T>>>& snap) {
    auto params = p.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].second->values() = snap[i].second;
}

} // namespace detail

// Full teacher-forcing training loop with per-iteration sensor subsets,
// epoch-level validation, and early stopping. Returns the best-epoch metrics;
// params are left at the best validation checkpoint.
template <class T>
train_result train_model(model_params<T>& params, const family_layout& layout,
                         const std::vector<series_window>& train_windows,
                         const std::vector<series_window>& val_windows, const train_config& tc,
                         const std::function<void(const epoch_metrics&, model_params<T>&)>& observer =
                             nullptr) {
    if (train_windows.empty()) throw std::invalid_argument("train_model: no training windows");
    if (val_windows.empty()) throw std::invalid_argument("train_model: no validation windows");
    if (tc.n_train < 1 || tc.n_train > params.n)
        throw std::invalid_argument("train_model: n_train must be in [1, N]");

    rng subset_rng = rng::stream(tc.seed, "subset");
    rng proto_rng = rng::stream(tc.seed, "proto");
    rng shuffle_rng = rng::stream(tc.seed, "shuffle");
    rng dropout_rng = rng::stream(tc.seed, "dropout");
    dropout_ctx dc{tc.dropout, tc.dropout > 0.0 ? &dropout_rng : nullptr};

    std::vector<std::size_t> all_sensors(params.n);
    for (std::size_t j = 0; j < params.n; ++j) all_sensors[j] = j;

    adam_state opt;
    train_result result;
    std::size_t iteration = 0;
    auto best = detail::snapshot_params(params);

    std::vector<std::size_t> order(train_windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const bool sparsified = tc.sparsify_epoch >= 0 &&
                                epoch > static_cast<std::size_t>(tc.sparsify_epoch);
        shuffle_rng.shuffle(order);
        double train_loss = 0.0;
        std::size_t steps = 0;
        double lr = lr_at(tc.lr, iteration);
        for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
            std::vector<const series_window*> batch;
            for (std::size_t i = b; i < std::min(b + tc.batch_size, order.size()); ++i)
                batch.push_back(&train_windows[order[i]]);
            auto sensors = sample_subset(params.n, tc.n_train, subset_rng);
            auto universe = sparsified
                                ? detail::request_universe(params, layout, sensors,
                                                           tc.sparsify_threshold)
                                : detail::all_variates(layout);
            lr = lr_at(tc.lr, iteration);
            train_loss +=
                teacher_forcing_step(params, layout, batch, sensors, opt, lr, proto_rng, universe, dc);
            ++steps;
            ++iteration;
        }
        train_loss /= static_cast<double>(steps);

        auto val_universe = sparsified ? detail::request_universe(params, layout, all_sensors,
                                                                  tc.sparsify_threshold)
                                       : detail::all_variates(layout);
        const double val =
            validation_loss(params, layout, val_windows, all_sensors, val_universe, tc.seed);

        epoch_metrics em;
        em.epoch = epoch;
        em.train_loss = train_loss;
        em.val_loss = val;
        em.learning_rate = lr;
        em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(em);
        if (observer) observer(em, params);

        if (val < result.best_val) {
            result.best_val = val;
            result.best_epoch = epoch;
            best = detail::snapshot_params(params);
        } else if (epoch - result.best_epoch > tc.patience) {
            break;
        }
    }
    detail::restore_params(params, best);
    return result;
}

// BPTT fine-tuning from a teacher-forcing checkpoint: fresh optimizer state,
// same subset sampling, validated by autoregressive MSE (the quantity BPTT
// optimizes). Cold-start BPTT is expected to diverge; callers start from a
// trained model.
template <class T>
train_result bptt_finetune(model_params<T>& params, const family_layout& layout,
                           const std::vector<series_window>& train_windows,
                           const std::vector<series_window>& val_windows, const train_config& tc,
                           std::size_t context_slots, std::size_t cycles,
                           const std::function<void(const epoch_metrics&, model_params<T>&)>&
                               observer = nullptr) {
    if (train_windows.empty()) throw std::invalid_argument("bptt_finetune: no training windows");
    if (val_windows.empty()) throw std::invalid_argument("bptt_finetune: no validation windows");

    rng subset_rng = rng::stream(tc.seed, "bptt-subset");
    rng shuffle_rng = rng::stream(tc.seed, "bptt-shuffle");

    std::vector<std::size_t> all_sensors(params.n);
    for (std::size_t j = 0; j < params.n; ++j) all_sensors[j] = j;
    forecast_request val_req;
    val_req.sensors = all_sensors;
    val_req.context_slots = context_slots;
    val_req.cycles = cycles;

    adam_state opt;  // reset to t = 0 for the fine-tuning phase
    train_result result;
    std::size_t iteration = 0;
    // the returned model is the best of the fine-tuned epochs; the starting
    // checkpoint is not a candidate
    auto best = detail::snapshot_params(params);

    std::vector<std::size_t> order(train_windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        shuffle_rng.shuffle(order);
        double train_loss = 0.0;
        std::size_t steps = 0;
        double lr = lr_at(tc.lr, iteration);
        for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
            std::vector<const series_window*> batch;
            for (std::size_t i = b; i < std::min(b + tc.batch_size, order.size()); ++i)
                batch.push_back(&train_windows[order[i]]);
            auto sensors = sample_subset(params.n, tc.n_train, subset_rng);
            lr = lr_at(tc.lr, iteration);
            train_loss += bptt_finetune_step(params, layout, batch, sensors, opt, lr, context_slots,
                                             cycles, detail::all_variates(layout));
            ++steps;
            ++iteration;
        }
        train_loss /= static_cast<double>(steps);
        const double val = evaluate(params, layout, val_windows, val_req).mse_mean;

        epoch_metrics em;
        em.epoch = epoch;
        em.train_loss = train_loss;
        em.val_loss = val;
        em.learning_rate = lr;
        em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(em);
        if (observer) observer(em, params);

        if (val < result.best_val) {
            result.best_val = val;
            result.best_epoch = epoch;
            best = detail::snapshot_params(params);
        } else if (epoch - result.best_epoch > tc.patience) {
            break;
        }
    }
    detail::restore_params(params, best);
    return result;
}

} // namespace vsens

#include "safer/sharpness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include "json.hpp"
#include "safer/errors.hpp"
#include "safer/kernels.hpp"
#include "safer/ops.hpp"
#include "safer/rng.hpp"
#include "safer/stats.hpp"
#include "safer/tape.hpp"

namespace safer {

using nlohmann::json;

const char* method_name(SharpnessReport::Method method) {
    return method == SharpnessReport::Method::estimator ? "estimator" : "oracle";
}

void SharpnessConfig::validate() const {
    if (rho <= 0.0) throw ConfigError("sharpness: rho must be positive");
    if (batch_size < 1) throw ConfigError("sharpness: batch_size must be >= 1");
    if (fraction <= 0.0 || fraction > 1.0) throw ConfigError("sharpness: fraction must be in (0,1]");
    if (oracle_steps < 1) throw ConfigError("sharpness: oracle_steps must be >= 1");
    attack.validate();
}

std::vector<int> rankable_for(const Model& model, const SharpnessConfig& cfg) {
    if (model.has_adapters() && cfg.gamma_on_adapters) {
        std::vector<int> out;
        for (const LayerHandle& h : model.registry())
            if (h.is_adapter && cfg.rankable_roles.count(h.role)) out.push_back(h.index);
        return out;
    }
    return model.rankable_handles(cfg.rankable_roles);
}

namespace {

using Clock = std::chrono::steady_clock;

double handle_grad_norm_sq(const Model& model, int handle) {
    double sq = 0.0;
    for (const int pid : model.params_of(handle)) {
        const Tensor& t = model.params()[static_cast<std::size_t>(pid)].tensor;
        const auto& g = t.grad_vec();
        sq += kernels::active().dot(g.data(), g.data(), g.size());
    }
    return sq;
}

Tensor rows(const Tensor& images, std::size_t start, std::size_t count) {
    Shape s = images.shape();
    const std::size_t per = images.size() / s[0];
    s[0] = count;
    Tensor out = make_tensor(s);
    std::copy(images.data() + start * per, images.data() + (start + count) * per, out.data());
    return out;
}

}  // namespace

void finalize_report(SharpnessReport& report, double fraction) {
    report.ranking.clear();
    for (const LayerGamma& lg : report.per_layer)
        if (!lg.failed) report.ranking.push_back(lg.handle);
    std::map<int, double> gamma_of;
    for (const LayerGamma& lg : report.per_layer) gamma_of[lg.handle] = lg.gamma;
    std::stable_sort(report.ranking.begin(), report.ranking.end(), [&](int a, int b) {
        if (gamma_of[a] != gamma_of[b]) return gamma_of[a] > gamma_of[b];
        return a < b;
    });
    report.degenerate = true;
    for (const LayerGamma& lg : report.per_layer)
        if (!lg.failed && lg.gamma != 0.0) report.degenerate = false;
    report.selected = select_top_k(report, fraction);
}

std::vector<int> select_top_k(const SharpnessReport& report, double fraction) {
    if (fraction <= 0.0 || fraction > 1.0) throw ConfigError("select_top_k: fraction must be in (0,1]");
    if (report.per_layer.empty()) throw ConfigError("select_top_k: empty report");
    const auto k = static_cast<std::size_t>(
        std::max<long long>(1, std::llround(fraction * static_cast<double>(report.per_layer.size()))));
    std::vector<int> out(report.ranking.begin(),
                         report.ranking.begin() + static_cast<long>(std::min(k, report.ranking.size())));
    return out;
}

SharpnessReport layer_sharpness_estimator(const Model& model, const Tensor& images,
                                          const std::vector<std::int64_t>& labels,
                                          const SharpnessConfig& cfg) {
    cfg.validate();
    if (labels.empty()) throw ConfigError("layer_sharpness_estimator: empty batch");
    const auto t0 = Clock::now();

    const AdvBatch adv =
        pgd(model, images, labels, cfg.attack.with_seed(Rng::derive(cfg.seed, "sharp-attack")));

    const std::vector<int> handles = rankable_for(model, cfg);
    std::map<int, double> gamma;
    for (const int h : handles) gamma[h] = 0.0;

    const std::size_t n = labels.size();
    const std::size_t mb = cfg.microbatch == 0 ? n : std::min(cfg.microbatch, n);
    model.zero_grads();
    for (std::size_t start = 0; start < n; start += mb) {
        const std::size_t count = std::min(mb, n - start);
        const Tensor chunk = rows(adv.adversarial, start, count);
        const std::vector<std::int64_t> chunk_labels(labels.begin() + static_cast<long>(start),
                                                     labels.begin() + static_cast<long>(start + count));
        Tape tape;
        Tape::Scope scope(tape);
        const Tensor loss = ops::cross_entropy_with_logits(model.forward(chunk), chunk_labels);
        tape.backward(loss);
        // loss is the microbatch mean; the per-sample-sum gradient norm is
        // count times the norm of the mean's gradient.
        for (const int h : handles)
            gamma[h] += static_cast<double>(count) * std::sqrt(handle_grad_norm_sq(model, h));
        model.zero_grads();
    }

    SharpnessReport report;
    report.method = SharpnessReport::Method::estimator;
    report.rho = cfg.rho;
    report.batch_size = n;
    report.microbatch = cfg.microbatch == 0 ? 0 : mb;
    report.normalized = cfg.normalize_by_param_count;
    report.batch_digest = batch_digest(images, labels);
    for (const int h : handles) {
        double g = gamma[h];
        if (cfg.normalize_by_param_count)
            g /= std::sqrt(static_cast<double>(model.handle(h).param_count));
        report.per_layer.push_back(LayerGamma{h, g, false});
    }
    finalize_report(report, cfg.fraction);
    report.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return report;
}

SharpnessReport layer_sharpness_oracle(Model& model, const Tensor& images,
                                       const std::vector<std::int64_t>& labels,
                                       const SharpnessConfig& cfg) {
    cfg.validate();
    if (labels.empty()) throw ConfigError("layer_sharpness_oracle: empty batch");
    const auto t0 = Clock::now();

    const AdvBatch adv =
        pgd(model, images, labels, cfg.attack.with_seed(Rng::derive(cfg.seed, "sharp-attack")));
    const std::size_t n = labels.size();

    // Per-sample forwards throughout: Eq-style per-sample maximization.
    std::vector<Tensor> sample_inputs;
    std::vector<std::vector<std::int64_t>> sample_labels;
    std::vector<double> base_loss(n);
    for (std::size_t s = 0; s < n; ++s) {
        sample_inputs.push_back(rows(adv.adversarial, s, 1));
        sample_labels.push_back({labels[s]});
        base_loss[s] =
            ops::cross_entropy_with_logits(model.forward(sample_inputs[s]), sample_labels[s]).item();
    }

    const std::vector<int> handles = rankable_for(model, cfg);
    SharpnessReport report;
    report.method = SharpnessReport::Method::oracle;
    report.rho = cfg.rho;
    report.batch_size = n;
    report.microbatch = 1;
    report.normalized = cfg.normalize_by_param_count;
    report.batch_digest = batch_digest(images, labels);

    for (const int h : handles) {
        const std::vector<int>& pids = model.params_of(h);
        std::vector<std::vector<double>> snapshot;
        std::size_t total = 0;
        for (const int pid : pids) {
            snapshot.push_back(model.params()[static_cast<std::size_t>(pid)].tensor.vec());
            total += snapshot.back().size();
        }
        const auto write_weights = [&](const std::vector<std::vector<double>>& eps) {
            for (std::size_t i = 0; i < pids.size(); ++i) {
                auto& w = model.params()[static_cast<std::size_t>(pids[i])].tensor.vec();
                if (eps.empty()) {
                    w = snapshot[i];
                } else {
                    kernels::active().add(snapshot[i].data(), eps[i].data(), w.data(), w.size());
                }
            }
        };

        double gamma = 0.0;
        bool failed = false;
        for (std::size_t s = 0; s < n && !failed; ++s) {
            double eta = cfg.rho / static_cast<double>(cfg.oracle_steps);
            for (int attempt = 0;; ++attempt) {
                std::vector<std::vector<double>> eps;
                for (const auto& snap : snapshot) eps.emplace_back(snap.size(), 0.0);
                double best = base_loss[s];
                bool finite = true;

                for (int step = 0; step < cfg.oracle_steps; ++step) {
                    write_weights(eps);
                    model.zero_grads();
                    double loss_val = 0.0;
                    {
                        Tape tape;
                        Tape::Scope scope(tape);
                        const Tensor loss =
                            ops::cross_entropy_with_logits(model.forward(sample_inputs[s]), sample_labels[s]);
                        loss_val = loss.item();
                        if (!std::isfinite(loss_val)) {
                            finite = false;
                            break;
                        }
                        best = std::max(best, loss_val);
                        tape.backward(loss);
                    }
                    double gnorm_sq = 0.0;
                    for (const int pid : pids) {
                        const auto& g = model.params()[static_cast<std::size_t>(pid)].tensor.grad_vec();
                        gnorm_sq += kernels::active().dot(g.data(), g.data(), g.size());
                    }
                    const double gnorm = std::sqrt(gnorm_sq);
                    if (gnorm == 0.0) break;  // flat along this layer
                    for (std::size_t i = 0; i < pids.size(); ++i) {
                        const auto& g = model.params()[static_cast<std::size_t>(pids[i])].tensor.grad_vec();
                        kernels::active().axpy(eta / gnorm, g.data(), eps[i].data(), eps[i].size());
                    }
                    double enorm_sq = 0.0;
                    for (const auto& e : eps) enorm_sq += kernels::active().dot(e.data(), e.data(), e.size());
                    const double enorm = std::sqrt(enorm_sq);
                    if (enorm > cfg.rho) {
                        for (auto& e : eps) kernels::active().scale(cfg.rho / enorm, e.data(), e.size());
                    }
                }

                if (finite) {
                    write_weights(eps);
                    const double final_loss =
                        ops::cross_entropy_with_logits(model.forward(sample_inputs[s]), sample_labels[s]).item();
                    if (std::isfinite(final_loss)) {
                        best = std::max(best, final_loss);
                        gamma += best - base_loss[s];
                        break;
                    }
                    finite = false;
                }
                if (attempt == 0) {
                    eta *= 0.5;  // shrink the step and retry once
                } else {
                    failed = true;
                    break;
                }
            }
            write_weights({});  // restore between samples
        }
        write_weights({});  // bit-exact restoration
        model.zero_grads();

        double g = gamma;
        if (cfg.normalize_by_param_count) g /= std::sqrt(static_cast<double>(total));
        report.per_layer.push_back(LayerGamma{h, failed ? 0.0 : g, failed});
    }

    finalize_report(report, cfg.fraction);
    report.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return report;
}

StabilityResult ranking_stability(const Model& model, const Dataset& data, const SharpnessConfig& cfg,
                                  std::span<const std::size_t> batch_sizes, int draws) {
    cfg.validate();
    if (draws < 2) throw ConfigError("ranking_stability: draws must be >= 2");
    if (batch_sizes.empty()) throw ConfigError("ranking_stability: empty batch-size grid");

    StabilityResult result;
    result.draws = draws;

    for (const std::size_t bs : batch_sizes) {
        if (data.size() < bs)
            throw ConfigError("ranking_stability: dataset of " + std::to_string(data.size()) +
                              " samples is smaller than batch " + std::to_string(bs));
        std::vector<std::set<int>> top_sets;
        std::vector<double> spreads;
        std::map<int, int> counts;
        for (int dr = 0; dr < draws; ++dr) {
            std::vector<std::size_t> idx(data.size());
            std::iota(idx.begin(), idx.end(), 0);
            Rng rng(Rng::derive(cfg.seed, "stability", bs, static_cast<std::uint64_t>(dr)));
            for (std::size_t i = 0; i < bs; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
            idx.resize(bs);
            auto [images, labels] = gather(data, idx);

            SharpnessConfig draw_cfg = cfg;
            draw_cfg.seed = Rng::derive(cfg.seed, "stability-draw", bs, static_cast<std::uint64_t>(dr));
            const SharpnessReport report = layer_sharpness_estimator(model, images, labels, draw_cfg);
            result.k = report.selected.size();
            top_sets.emplace_back(report.selected.begin(), report.selected.end());
            for (const int h : report.selected) counts[h]++;

            double lo = 0.0, hi = 0.0;
            bool first = true;
            for (const LayerGamma& lg : report.per_layer) {
                if (lg.failed) continue;
                if (first) {
                    lo = hi = lg.gamma;
                    first = false;
                } else {
                    lo = std::min(lo, lg.gamma);
                    hi = std::max(hi, lg.gamma);
                }
            }
            spreads.push_back(lo > 0.0 ? hi / lo : 0.0);
        }

        StabilityEntry entry;
        entry.batch_size = bs;
        std::size_t agree = 0, pairs = 0;
        for (std::size_t a = 0; a < top_sets.size(); ++a) {
            for (std::size_t b = a + 1; b < top_sets.size(); ++b) {
                ++pairs;
                if (top_sets[a] == top_sets[b]) ++agree;
            }
        }
        entry.agreement = pairs ? static_cast<double>(agree) / static_cast<double>(pairs) : 1.0;
        entry.median_gamma_spread = median_of(spreads);
        for (const auto& [h, c] : counts)
            entry.selection_frequency[h] = static_cast<double>(c) / static_cast<double>(draws);
        result.entries.push_back(std::move(entry));
    }

    for (const StabilityEntry& e : result.entries)
        if (e.median_gamma_spread < 4.0 || e.agreement < 0.6) result.low_confidence = true;
    return result;
}

std::string report_to_json(const SharpnessReport& report, const Model& model) {
    json j;
    j["method"] = method_name(report.method);
    j["rho"] = report.rho;
    j["batch_size"] = report.batch_size;
    j["microbatch"] = report.microbatch;
    j["normalized"] = report.normalized;
    j["batch_digest"] = report.batch_digest;
    j["degenerate"] = report.degenerate;
    j["wall_seconds"] = report.wall_seconds;
    j["layers"] = json::array();
    for (const LayerGamma& lg : report.per_layer) {
        const LayerHandle& h = model.handle(lg.handle);
        json entry{{"index", h.index}, {"name", h.name}, {"role", role_name(h.role)}, {"gamma", lg.gamma}};
        if (lg.failed) entry["failed"] = true;
        j["layers"].push_back(entry);
    }
    j["ranking"] = report.ranking;
    j["selected"] = report.selected;
    return j.dump(2);
}

std::string report_to_table(const SharpnessReport& report, const Model& model) {
    std::ostringstream oss;
    oss << "layer sharpness (" << method_name(report.method) << ", rho=" << report.rho
        << ", batch=" << report.batch_size << ", digest=" << report.batch_digest << ")\n";
    oss << "  rank  index  gamma          layer\n";
    const std::set<int> selected(report.selected.begin(), report.selected.end());
    int rank = 1;
    for (const int h : report.ranking) {
        double gamma = 0.0;
        for (const LayerGamma& lg : report.per_layer)
            if (lg.handle == h) gamma = lg.gamma;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "  %4d  %5d  %-13.6g %s%s\n", rank, h, gamma,
                      model.handle(h).name.c_str(), selected.count(h) ? "  [selected]" : "");
        oss << buf;
        ++rank;
    }
    for (const LayerGamma& lg : report.per_layer)
        if (lg.failed) oss << "  (failed: " << model.handle(lg.handle).name << ")\n";
    if (report.degenerate) oss << "  note: all gammas are zero\n";
    return oss.str();
}

}  // namespace safer

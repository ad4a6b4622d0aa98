#include "safer/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "safer/errors.hpp"
#include "safer/kernels.hpp"
#include "safer/ops.hpp"
#include "safer/rng.hpp"
#include "safer/tape.hpp"

namespace safer {

const char* norm_name(Norm norm) { return norm == Norm::linf ? "linf" : "l2"; }

Norm norm_from_name(const std::string& name) {
    if (name == "linf") return Norm::linf;
    if (name == "l2") return Norm::l2;
    throw ConfigError("unknown attack norm '" + name + "' (want linf|l2)");
}

void AttackConfig::validate() const {
    if (epsilon < 0.0) throw ConfigError("attack: epsilon must be >= 0");
    if (steps < 0) throw ConfigError("attack: steps must be >= 0");
    if (steps > 0 && alpha <= 0.0) throw ConfigError("attack: alpha must be > 0 when steps > 0");
}

namespace {

double sample_l2_norm(const double* v, std::size_t n) {
    return std::sqrt(kernels::active().dot(v, v, n));
}

// Range clip toward [0,1] then norm-ball projection; the final range clamp in
// the caller only shrinks coordinates, so the budget survives it.
void project(std::vector<double>& delta, const double* clean, std::size_t samples, std::size_t per,
             Norm norm, double eps) {
    const auto& k = kernels::active();
    for (std::size_t s = 0; s < samples; ++s) {
        double* d = delta.data() + s * per;
        const double* x = clean + s * per;
        for (std::size_t i = 0; i < per; ++i) {
            double v = x[i] + d[i];
            if (v < 0.0) v = 0.0;
            if (v > 1.0) v = 1.0;
            d[i] = v - x[i];
        }
        if (norm == Norm::linf) {
            k.clamp(d, -eps, eps, d, per);
        } else {
            const double nrm = sample_l2_norm(d, per);
            if (nrm > eps && nrm > 0.0) k.scale(eps / nrm, d, per);
        }
    }
}

}  // namespace

AdvBatch pgd(const Model& model, const Tensor& images, const std::vector<std::int64_t>& labels,
             const AttackConfig& cfg) {
    cfg.validate();
    const Shape& shape = images.shape();
    if (shape.size() != 4) throw DimensionError("pgd: expected images [n,c,h,w], got " + shape_str(shape));
    const std::size_t samples = shape[0];
    const std::size_t per = images.size() / std::max<std::size_t>(samples, 1);
    if (labels.size() != samples) throw DimensionError("pgd: label count does not match batch");
    for (const double v : images.vec())
        if (v < 0.0 || v > 1.0) throw DomainError("pgd: images must lie in [0,1]");

    Rng rng(Rng::derive(cfg.seed, "pgd"));
    std::vector<double> delta(images.size(), 0.0);
    if (cfg.random_start && cfg.epsilon > 0.0) {
        if (cfg.norm == Norm::linf) {
            for (double& d : delta) d = rng.uniform(-cfg.epsilon, cfg.epsilon);
        } else {
            // uniform in the ball: sphere direction scaled by radius * u^(1/n)
            std::vector<double> dir(per);
            for (std::size_t s = 0; s < samples; ++s) {
                for (double& v : dir) v = rng.normal();
                const double nrm = sample_l2_norm(dir.data(), per);
                const double radius =
                    cfg.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(per));
                const double scale = nrm > 0.0 ? radius / nrm : 0.0;
                for (std::size_t i = 0; i < per; ++i) delta[s * per + i] = dir[i] * scale;
            }
        }
        project(delta, images.data(), samples, per, cfg.norm, cfg.epsilon);
    }

    AdvBatch out;
    out.clean = images;
    out.labels = labels;

    const auto current_point = [&]() {
        Tensor x = make_tensor(shape);
        kernels::active().add(images.data(), delta.data(), x.data(), images.size());
        kernels::active().clamp(x.data(), 0.0, 1.0, x.data(), x.size());
        return x;
    };

    if (cfg.steps > 0) {
        ParamGradGuard frozen(model);
        std::vector<double> grad(images.size());
        const auto forward = [&](bool want_grad) {
            Tensor x = current_point();
            if (want_grad) {
                x.set_requires_grad(true);
                Tape tape;
                Tape::Scope scope(tape);
                Tensor loss = ops::cross_entropy_with_logits(model.forward(x), labels);
                tape.backward(loss);
                grad = x.grad_vec();
                return loss.item();
            }
            return ops::cross_entropy_with_logits(model.forward(x), labels).item();
        };

        forward(true);
        for (int step = 1; step <= cfg.steps; ++step) {
            if (cfg.norm == Norm::linf) {
                for (std::size_t i = 0; i < delta.size(); ++i) {
                    const double g = grad[i];
                    delta[i] += cfg.alpha * ((g > 0.0) ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
                }
            } else {
                for (std::size_t s = 0; s < samples; ++s) {
                    const double nrm = sample_l2_norm(grad.data() + s * per, per);
                    if (nrm == 0.0) continue;  // degenerate gradient: leave delta as-is
                    kernels::active().axpy(cfg.alpha / nrm, grad.data() + s * per,
                                           delta.data() + s * per, per);
                }
            }
            project(delta, images.data(), samples, per, cfg.norm, cfg.epsilon);
            out.loss_trace.push_back(forward(step < cfg.steps));
        }
    }

    Tensor adv = current_point();
    // budget + range feasibility, asserted on every emitted batch
    for (std::size_t s = 0; s < samples; ++s) {
        const double* a = adv.data() + s * per;
        const double* x = images.data() + s * per;
        double linf = 0.0, sq = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            if (a[i] < 0.0 || a[i] > 1.0) throw ContractError("pgd: sample escaped [0,1]");
            const double d = a[i] - x[i];
            linf = std::max(linf, std::fabs(d));
            sq += d * d;
        }
        const double dist = cfg.norm == Norm::linf ? linf : std::sqrt(sq);
        if (dist > cfg.epsilon + 1e-9) throw ContractError("pgd: sample escaped the norm budget");
    }
    out.adversarial = std::move(adv);
    return out;
}

double accuracy(const Model& model, const Tensor& images, const std::vector<std::int64_t>& labels,
                std::size_t batch_size) {
    const std::size_t n = labels.size();
    if (n == 0) throw ConfigError("accuracy: empty batch");
    const std::size_t per = images.size() / n;
    const std::size_t classes = model.config().num_classes;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t count = std::min(batch_size, n - start);
        Shape s = images.shape();
        s[0] = count;
        Tensor chunk = make_tensor(s);
        std::copy(images.data() + start * per, images.data() + (start + count) * per, chunk.data());
        const Tensor logits = model.forward(chunk);
        for (std::size_t i = 0; i < count; ++i) {
            const double* row = logits.data() + i * classes;
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (row[c] > row[best]) best = c;
            if (static_cast<std::int64_t>(best) == labels[start + i]) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

EvalResult evaluate_robustness(const Model& model, const Tensor& images,
                               const std::vector<std::int64_t>& labels, const AttackConfig& cfg,
                               std::size_t batch_size) {
    EvalResult result;
    result.n = labels.size();
    result.clean_acc = accuracy(model, images, labels, batch_size);

    const std::size_t n = labels.size();
    const std::size_t per = images.size() / n;
    const std::size_t classes = model.config().num_classes;
    std::size_t hits = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += batch_size, ++batch_index) {
        const std::size_t count = std::min(batch_size, n - start);
        Shape s = images.shape();
        s[0] = count;
        Tensor chunk = make_tensor(s);
        std::copy(images.data() + start * per, images.data() + (start + count) * per, chunk.data());
        std::vector<std::int64_t> chunk_labels(labels.begin() + static_cast<long>(start),
                                               labels.begin() + static_cast<long>(start + count));
        const AdvBatch adv = pgd(model, chunk, chunk_labels,
                                 cfg.with_seed(Rng::derive(cfg.seed, "eval", batch_index)));
        const Tensor logits = model.forward(adv.adversarial);
        for (std::size_t i = 0; i < count; ++i) {
            const double* row = logits.data() + i * classes;
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (row[c] > row[best]) best = c;
            if (static_cast<std::int64_t>(best) == chunk_labels[i]) ++hits;
        }
    }
    result.robust_acc = static_cast<double>(hits) / static_cast<double>(n);
    return result;
}

std::vector<StepAccuracy> attack_convergence(const Model& model, const Dataset& data,
                                             const AttackConfig& cfg, std::span<const int> step_grid,
                                             std::size_t batch_size) {
    if (step_grid.empty()) throw ConfigError("attack_convergence: empty step grid");
    for (std::size_t i = 1; i < step_grid.size(); ++i)
        if (step_grid[i] <= step_grid[i - 1]) throw ConfigError("attack_convergence: step grid must ascend");

    auto [images, labels] = take(data, data.size());
    std::vector<StepAccuracy> table;
    for (const int steps : step_grid) {
        AttackConfig c = cfg;
        c.steps = steps;
        const EvalResult r = evaluate_robustness(model, images, labels, c, batch_size);
        table.push_back(StepAccuracy{steps, r.robust_acc});
    }
    return table;
}

double transfer_eval(const Model& attacker, const Model& victim, const Dataset& data,
                     const AttackConfig& cfg, std::size_t batch_size) {
    const ViTConfig& a = attacker.config();
    const ViTConfig& v = victim.config();
    if (a.image_size != v.image_size || a.channels != v.channels || a.num_classes != v.num_classes)
        throw DimensionError("transfer_eval: attacker and victim input shapes differ");

    auto [images, labels] = take(data, data.size());
    const std::size_t n = labels.size();
    const std::size_t per = images.size() / n;
    const std::size_t classes = v.num_classes;
    std::size_t hits = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += batch_size, ++batch_index) {
        const std::size_t count = std::min(batch_size, n - start);
        Shape s = images.shape();
        s[0] = count;
        Tensor chunk = make_tensor(s);
        std::copy(images.data() + start * per, images.data() + (start + count) * per, chunk.data());
        std::vector<std::int64_t> chunk_labels(labels.begin() + static_cast<long>(start),
                                               labels.begin() + static_cast<long>(start + count));
        const AdvBatch adv = pgd(attacker, chunk, chunk_labels,
                                 cfg.with_seed(Rng::derive(cfg.seed, "eval", batch_index)));
        const Tensor logits = victim.forward(adv.adversarial);
        for (std::size_t i = 0; i < count; ++i) {
            const double* row = logits.data() + i * classes;
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (row[c] > row[best]) best = c;
            if (static_cast<std::int64_t>(best) == chunk_labels[i]) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace safer

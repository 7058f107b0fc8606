#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "fdm/data/phantom.hpp"
#include "fdm/nn/adam.hpp"
#include "fdm/nn/ops.hpp"
#include "fdm/nn/rng.hpp"
#include "fdm/nn/training.hpp"
#include "fdm/nn/unet.hpp"
#include "fdm/text/kv.hpp"

// Mask-conditioned DDPM: linear beta schedule, epsilon-prediction loss and
// ancestral sampling. Images live in [0,1]; the mask is concatenated as a
// second input channel.
namespace fdm::diffusion {

using nn::ParamTree;
using nn::Tape;
using nn::Tensor;
using nn::Var;

// Index 0 of betas/alphas/sigmas is unused; alpha_bars[0] = 1.
struct NoiseSchedule {
    int T = 0;
    double beta_min = 0, beta_max = 0;
    std::vector<double> betas, alphas, alpha_bars, sigmas;
};

inline NoiseSchedule build_schedule(int T, double beta_min, double beta_max) {
    if (T < 2) throw Error("build_schedule: T must be at least 2, got " + std::to_string(T));
    if (!(beta_min > 0 && beta_min <= beta_max && beta_max < 1)) {
        throw Error("build_schedule: need 0 < beta_min <= beta_max < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    const auto n = static_cast<std::size_t>(T) + 1;
    s.betas.assign(n, 0.0);
    s.alphas.assign(n, 1.0);
    s.alpha_bars.assign(n, 1.0);
    s.sigmas.assign(n, 0.0);
    for (std::size_t t = 1; t < n; ++t) {
        s.betas[t] = beta_min + static_cast<double>(t - 1) / (T - 1) * (beta_max - beta_min);
        s.alphas[t] = 1.0 - s.betas[t];
        s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
        s.sigmas[t] = std::sqrt(s.betas[t]);
    }
    return s;
}

// xt = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, with t = 0 returning x0.
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
    if (t < 0 || t > s.T) throw Error("q_sample: t = " + std::to_string(t) + " outside [0," + std::to_string(s.T) + "]");
    if (x0.shape != eps.shape) throw ShapeError("q_sample: eps shape " + nn::to_string(eps.shape) + " != x0 shape " + nn::to_string(x0.shape));
    if (t == 0) return x0;
    const double a = std::sqrt(s.alpha_bars[static_cast<std::size_t>(t)]);
    const double b = std::sqrt(1.0 - s.alpha_bars[static_cast<std::size_t>(t)]);
    Tensor<T> out(x0.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(a * x0[i] + b * eps[i]);
    return out;
}

// Maps a [N,2,H,W] input and per-sample timesteps to predicted noise [N,1,H,W].
template <class T>
using EpsNet = std::function<Var<T>(Var<T> input, const std::vector<int>& steps)>;

inline nn::UNetSpec eps_net_spec() { return {"eps", 2, 1, 32, 64, 8, 32, {1, 1, 2}}; }

template <class T>
EpsNet<T> unet_eps_net(const nn::UNetSpec& spec, nn::ParamBinder<T>& binder) {
    return [&spec, &binder](Var<T> x, const std::vector<int>& steps) { return nn::unet_forward(spec, binder, x, &steps); };
}

// Batch helpers: [N,1,H,W] tensors from samples.
inline Tensor<float> stack_images(const std::vector<const data::Sample*>& batch) {
    const std::size_t hw = batch.at(0)->pixels();
    Tensor<float> out({batch.size(), 1, batch[0]->height, batch[0]->width});
    for (std::size_t n = 0; n < batch.size(); ++n) std::copy_n(batch[n]->image.data(), hw, out.data.data() + n * hw);
    return out;
}

inline Tensor<float> stack_masks(const std::vector<const data::Sample*>& batch) {
    const std::size_t hw = batch.at(0)->pixels();
    Tensor<float> out({batch.size(), 1, batch[0]->height, batch[0]->width});
    for (std::size_t n = 0; n < batch.size(); ++n) {
        for (std::size_t i = 0; i < hw; ++i) out[n * hw + i] = batch[n]->mask[i];
    }
    return out;
}

// Epsilon-prediction MSE for a batch. x0, mask and eps are [N,1,H,W].
template <class T>
Var<T> ddpm_loss(Tape<T>& tape, const EpsNet<T>& net, const Tensor<T>& x0, const Tensor<T>& mask,
                 const std::vector<int>& steps, const Tensor<T>& eps, const NoiseSchedule& s) {
    if (x0.shape != mask.shape || x0.shape != eps.shape || x0.rank() != 4 || x0.dim(1) != 1) {
        throw ShapeError("ddpm_loss: x0, mask and eps must share shape [N,1,H,W]");
    }
    const std::size_t N = x0.dim(0), hw = x0.numel() / N;
    if (steps.size() != N) throw ShapeError("ddpm_loss: one timestep per sample required");
    Tensor<T> xt(x0.shape);
    for (std::size_t n = 0; n < N; ++n) {
        if (steps[n] < 1 || steps[n] > s.T) throw Error("ddpm_loss: timestep out of [1,T]");
        const double a = std::sqrt(s.alpha_bars[static_cast<std::size_t>(steps[n])]);
        const double b = std::sqrt(1.0 - s.alpha_bars[static_cast<std::size_t>(steps[n])]);
        for (std::size_t i = n * hw; i < (n + 1) * hw; ++i) xt[i] = static_cast<T>(a * x0[i] + b * eps[i]);
    }
    Var<T> input = nn::concat_channels(tape.constant(std::move(xt)), tape.constant(mask));
    Var<T> loss = nn::mse_loss(net(input, steps), tape.constant(eps));
    if (!std::isfinite(loss.value()[0])) {
        throw DivergenceError("ddpm_loss: non-finite loss (steps " + std::to_string(steps.front()) + ".." +
                              std::to_string(steps.back()) + ", batch " + std::to_string(N) + ")");
    }
    return loss;
}

struct DiffusionTrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    std::uint64_t seed = 1;
    int T = 200;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    std::function<void(const std::string&)> progress;

    void validate() const {
        if (epochs == 0 || batch_size == 0 || !(lr > 0) || T < 10 || !(beta_min > 0) || !(beta_max > 0)) {
            throw Error("diffusion config: epochs, batch size, lr and betas must be positive and T >= 10");
        }
    }

    std::string digest_text() const {
        return "epochs=" + std::to_string(epochs) + ";batch=" + std::to_string(batch_size) + ";lr=" +
               text::format_double(lr) + ";seed=" + std::to_string(seed) + ";T=" + std::to_string(T) + ";beta=" +
               text::format_double(beta_min) + "," + text::format_double(beta_max);
    }
};

struct TrainingLog {
    std::vector<double> epoch_loss;
};

// Trains the epsilon network on the given (train-split) samples.
inline std::pair<ParamTree<float>, TrainingLog> train_diffusion(const std::vector<data::Sample>& train,
                                                                const DiffusionTrainConfig& cfg,
                                                                const nn::UNetSpec& spec = eps_net_spec()) {
    cfg.validate();
    if (train.empty()) throw Error("train_diffusion: empty training split");
    const NoiseSchedule sched = build_schedule(cfg.T, cfg.beta_min, cfg.beta_max);
    ParamTree<float> params = nn::unet_init(spec, nn::RngStream(cfg.seed, 0xd1f0));
    nn::AdamState adam(nn::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    TrainingLog log;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        ParamTree<float> last_good = params;
        nn::RngStream order_rng(cfg.seed, 0xd1f100000000ull + epoch);
        nn::RngStream noise_rng(cfg.seed, 0xd1f200000000ull + epoch);
        const auto order = nn::shuffled_indices(train.size(), order_rng);
        double loss_sum = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            std::vector<const data::Sample*> batch;
            std::vector<int> steps;
            for (std::size_t k = 0; k < n; ++k) {
                batch.push_back(&train[order[start + k]]);
                steps.push_back(1 + static_cast<int>(noise_rng.index(static_cast<std::uint64_t>(cfg.T))));
            }
            const Tensor<float> x0 = stack_images(batch);
            const Tensor<float> eps = nn::rng_gaussian<float>(noise_rng, x0.shape);
            try {
                Tape<float> tape;
                nn::ParamBinder<float> binder(tape, params);
                auto net = unet_eps_net(spec, binder);
                Var<float> loss = ddpm_loss<float>(tape, net, x0, stack_masks(batch), steps, eps, sched);
                tape.backward(loss);
                nn::adam_step(params, binder.grads(), adam);
                loss_sum += loss.value()[0];
                ++batches;
            } catch (const DivergenceError& e) {
                throw nn::TrainingDiverged(std::string("train_diffusion: epoch ") + std::to_string(epoch + 1) + ": " +
                                               e.what(),
                                           std::move(last_good), epoch);
            }
        }
        for (const auto& [path, t] : params) {
            if (!t.all_finite()) {
                throw nn::TrainingDiverged("train_diffusion: non-finite parameter " + path, std::move(last_good), epoch);
            }
        }
        log.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
        if (cfg.progress) {
            cfg.progress("diffusion epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
                         " loss " + std::to_string(log.epoch_loss.back()));
        }
    }
    return {std::move(params), std::move(log)};
}

inline constexpr double kSampleClipLo = -1.5;
inline constexpr double kSampleClipHi = 2.5;

// A net evaluator that builds its own (non-recording) tape per call.
using EpsEvaluator = std::function<Tensor<float>(const Tensor<float>& input, const std::vector<int>& steps)>;

inline EpsEvaluator unet_evaluator(const nn::UNetSpec& spec, const ParamTree<float>& params) {
    return [spec, &params](const Tensor<float>& input, const std::vector<int>& steps) {
        Tape<float> tape(false);
        nn::ParamBinder<float> binder(tape, params);
        return nn::unet_forward(spec, binder, tape.constant(input), &steps).value();
    };
}

// Called with (t, states) after each reverse step lands on x_t.
using StepObserver = std::function<void(int, const std::vector<std::vector<double>>&)>;

// Ancestral sampling for a batch of masks, each with its own stream. Returns
// x_0 per sample before the final [0,1] clip. State is kept in double.
inline std::vector<std::vector<double>> ancestral_chain(const EpsEvaluator& net,
                                                        const std::vector<const std::vector<std::uint8_t>*>& masks,
                                                        std::size_t H, std::size_t W, const NoiseSchedule& s,
                                                        std::vector<nn::RngStream>& streams,
                                                        const StepObserver& observe = {}) {
    const std::size_t N = masks.size(), hw = H * W;
    if (streams.size() != N) throw Error("ancestral_chain: one stream per mask required");
    std::vector<std::vector<double>> x(N);
    for (std::size_t n = 0; n < N; ++n) {
        if (masks[n]->size() != hw) throw ShapeError("ancestral_chain: mask size mismatch");
        x[n] = nn::rng_gaussian<double>(streams[n], {hw}).data;
    }
    Tensor<float> input({N, 2, H, W});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < hw; ++i) input[(2 * n + 1) * hw + i] = (*masks[n])[i];
    }
    for (int t = s.T; t >= 1; --t) {
        const auto ut = static_cast<std::size_t>(t);
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t i = 0; i < hw; ++i) input[2 * n * hw + i] = static_cast<float>(x[n][i]);
        }
        const Tensor<float> eps = net(input, std::vector<int>(N, t));
        const double inv_sqrt_a = 1.0 / std::sqrt(s.alphas[ut]);
        const double coef = s.betas[ut] / std::sqrt(1.0 - s.alpha_bars[ut]);
        for (std::size_t n = 0; n < N; ++n) {
            std::vector<double> z;
            if (t > 1) z = nn::rng_gaussian<double>(streams[n], {hw}).data;
            for (std::size_t i = 0; i < hw; ++i) {
                double v = inv_sqrt_a * (x[n][i] - coef * eps[n * hw + i]);
                if (t > 1) v += s.sigmas[ut] * z[i];
                x[n][i] = std::clamp(v, kSampleClipLo, kSampleClipHi);
            }
        }
        if (observe) observe(t - 1, x);
    }
    return x;
}

inline std::vector<float> finalize_sample(const std::vector<double>& x) {
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(std::clamp(x[i], 0.0, 1.0));
    return out;
}

inline std::vector<float> sample_conditional(const nn::UNetSpec& spec, const ParamTree<float>& params,
                                             const std::vector<std::uint8_t>& mask, std::size_t H, std::size_t W,
                                             const NoiseSchedule& s, nn::RngStream stream) {
    std::vector<nn::RngStream> streams{stream};
    return finalize_sample(ancestral_chain(unet_evaluator(spec, params), {&mask}, H, W, s, streams)[0]);
}

// Stream for the mask of (patient, slice); independent of list order.
inline nn::RngStream mask_stream(std::uint64_t seed, std::uint32_t patient, std::uint32_t slice) {
    return nn::RngStream(seed, 0x5a4e).substream((std::uint64_t{patient} << 16) | slice);
}

struct SynthesisConfig {
    std::uint64_t seed = 1;
    std::size_t batch_size = 16;
    std::size_t threads = 1;
    std::function<void(const std::string&)> progress;
};

// One synthetic image per local train mask, generated by a remote site's
// model. Patient ids and slice indices are kept; every patient is tagged train.
inline data::SiteDataset synthesize_dataset(const nn::UNetSpec& spec, const ParamTree<float>& params,
                                            char generator_site, const data::SiteDataset& local,
                                            const NoiseSchedule& s, const SynthesisConfig& cfg) {
    const std::vector<data::Sample> masks = local.in_split(data::Split::train);
    if (masks.empty()) throw Error("synthesize_dataset: no train-split masks in site " + local.site_id);
    data::SiteDataset out;
    out.site_id = local.site_id;
    out.samples.resize(masks.size());
    const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
    const std::size_t n_batches = (masks.size() + bs - 1) / bs;
    auto run_batch = [&](std::size_t b) {
        const std::size_t lo = b * bs, hi = std::min(masks.size(), lo + bs);
        std::vector<const std::vector<std::uint8_t>*> mp;
        std::vector<nn::RngStream> streams;
        for (std::size_t i = lo; i < hi; ++i) {
            mp.push_back(&masks[i].mask);
            streams.push_back(mask_stream(cfg.seed, masks[i].patient_id, masks[i].slice_index));
        }
        auto xs = ancestral_chain(unet_evaluator(spec, params), mp, masks[lo].height, masks[lo].width, s, streams);
        for (std::size_t i = lo; i < hi; ++i) {
            data::Sample syn;
            syn.height = masks[i].height;
            syn.width = masks[i].width;
            syn.image = finalize_sample(xs[i - lo]);
            syn.mask = masks[i].mask;
            syn.patient_id = masks[i].patient_id;
            syn.slice_index = masks[i].slice_index;
            syn.provenance = {true, generator_site};
            out.samples[i] = std::move(syn);
        }
    };
    const std::size_t threads = std::min(std::max<std::size_t>(1, cfg.threads), n_batches);
    if (threads == 1) {
        for (std::size_t b = 0; b < n_batches; ++b) {
            run_batch(b);
            if (cfg.progress) cfg.progress("synthesized batch " + std::to_string(b + 1) + "/" + std::to_string(n_batches));
        }
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t w = 0; w < threads; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t b = w; b < n_batches; b += threads) run_batch(b);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    for (const auto& m : masks) out.splits[m.patient_id] = data::Split::train;
    return out;
}

} // namespace fdm::diffusion

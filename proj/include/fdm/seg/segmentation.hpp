#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "fdm/data/phantom.hpp"
#include "fdm/diffusion/ddpm.hpp"
#include "fdm/nn/adam.hpp"
#include "fdm/nn/ops.hpp"
#include "fdm/nn/training.hpp"
#include "fdm/nn/unet.hpp"

namespace fdm::seg {

using nn::ParamTree;
using nn::Tape;
using nn::Tensor;
using nn::Var;

inline nn::UNetSpec seg_net_spec() { return {"seg", 1, 1, 16, 0}; }

// Sigmoid probabilities for images [N,1,H,W].
inline Tensor<float> seg_forward(const nn::UNetSpec& spec, const ParamTree<float>& params, const Tensor<float>& images) {
    if (images.rank() != 4 || images.dim(1) != 1) {
        throw ShapeError("seg_forward: expected [N,1,H,W], got " + nn::to_string(images.shape));
    }
    Tape<float> tape(false);
    nn::ParamBinder<float> binder(tape, params);
    return nn::sigmoid(nn::unet_forward(spec, binder, tape.constant(images))).value();
}

inline std::vector<std::uint8_t> threshold_mask(const float* probs, std::size_t n, double threshold) {
    std::vector<std::uint8_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = probs[i] > threshold ? 1 : 0;
    return out;
}

// 2|P & T| / (|P| + |T|); 1 when both are empty.
inline double dice_score(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
    if (pred.size() != truth.size()) throw ShapeError("dice_score: masks differ in size");
    std::size_t inter = 0, p = 0, t = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] > 1 || truth[i] > 1) throw Error("dice_score: masks must be binary");
        inter += pred[i] & truth[i];
        p += pred[i];
        t += truth[i];
    }
    if (p + t == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

struct SegTrainConfig {
    std::size_t epochs = 40;
    std::size_t batch_size = 8;
    double lr = 2e-3;
    std::uint64_t seed = 1;
    std::size_t patience = 10;
    double threshold = 0.5;
    std::function<void(const std::string&)> progress;

    void validate() const {
        if (epochs == 0 || batch_size == 0 || !(lr > 0) || patience == 0) {
            throw Error("segmentation config: epochs, batch size, lr and patience must be positive");
        }
        if (!(threshold > 0 && threshold < 1)) throw Error("segmentation config: threshold must lie in (0,1)");
    }

    std::string digest_text() const {
        return "epochs=" + std::to_string(epochs) + ";batch=" + std::to_string(batch_size) + ";lr=" +
               text::format_double(lr) + ";seed=" + std::to_string(seed) + ";patience=" + std::to_string(patience) +
               ";threshold=" + text::format_double(threshold);
    }
};

struct SegTrainingLog {
    std::vector<double> epoch_loss;
    std::vector<double> val_dice;
    std::size_t best_epoch = 0; // 1-based
    double best_val_dice = 0;
};

inline double mean_dice(const nn::UNetSpec& spec, const ParamTree<float>& params, const std::vector<data::Sample>& set,
                        double threshold, std::vector<double>* per_slice = nullptr) {
    constexpr std::size_t kBatch = 32;
    double sum = 0;
    for (std::size_t lo = 0; lo < set.size(); lo += kBatch) {
        const std::size_t hi = std::min(set.size(), lo + kBatch);
        std::vector<const data::Sample*> batch;
        for (std::size_t i = lo; i < hi; ++i) batch.push_back(&set[i]);
        const Tensor<float> probs = seg_forward(spec, params, diffusion::stack_images(batch));
        const std::size_t hw = set[lo].pixels();
        for (std::size_t i = lo; i < hi; ++i) {
            const double d = dice_score(threshold_mask(probs.data.data() + (i - lo) * hw, hw, threshold), set[i].mask);
            sum += d;
            if (per_slice) per_slice->push_back(d);
        }
    }
    return sum / static_cast<double>(set.size());
}

// Adam on soft Dice; keeps the parameters with the best mean val Dice and
// stops after `patience` epochs without improvement.
inline std::pair<ParamTree<float>, SegTrainingLog> train_segmentation(const std::vector<data::Sample>& train,
                                                                      const std::vector<data::Sample>& val,
                                                                      const SegTrainConfig& cfg,
                                                                      const nn::UNetSpec& spec = seg_net_spec()) {
    cfg.validate();
    if (train.empty()) throw Error("train_segmentation: empty training set");
    if (val.empty()) throw Error("train_segmentation: empty validation set");
    for (const auto& s : val) {
        if (s.provenance.synthetic) throw Error("train_segmentation: validation set contains synthetic samples");
    }
    ParamTree<float> params = nn::unet_init(spec, nn::RngStream(cfg.seed, 0x5e90));
    ParamTree<float> best = params;
    nn::AdamState adam(nn::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    SegTrainingLog log;
    log.best_val_dice = -1;
    std::size_t since_best = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        ParamTree<float> last_good = params;
        nn::RngStream order_rng(cfg.seed, 0x5e9100000000ull + epoch);
        const auto order = nn::shuffled_indices(train.size(), order_rng);
        double loss_sum = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            std::vector<const data::Sample*> batch;
            for (std::size_t k = 0; k < n; ++k) batch.push_back(&train[order[start + k]]);
            try {
                Tape<float> tape;
                nn::ParamBinder<float> binder(tape, params);
                Var<float> logits = nn::unet_forward(spec, binder, tape.constant(diffusion::stack_images(batch)));
                Var<float> loss = nn::soft_dice_loss(nn::sigmoid(logits), tape.constant(diffusion::stack_masks(batch)));
                tape.backward(loss);
                nn::adam_step(params, binder.grads(), adam);
                loss_sum += loss.value()[0];
                ++batches;
            } catch (const DivergenceError& e) {
                throw nn::TrainingDiverged(std::string("train_segmentation: epoch ") + std::to_string(epoch + 1) +
                                               ": " + e.what(),
                                           std::move(last_good), epoch);
            }
        }
        log.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
        const double vd = mean_dice(spec, params, val, cfg.threshold);
        log.val_dice.push_back(vd);
        if (vd > log.best_val_dice) {
            log.best_val_dice = vd;
            log.best_epoch = epoch + 1;
            best = params;
            since_best = 0;
        } else {
            ++since_best;
        }
        if (cfg.progress) {
            cfg.progress("segmentation epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
                         " loss " + std::to_string(log.epoch_loss.back()) + " val dice " + std::to_string(vd));
        }
        if (since_best >= cfg.patience) break;
    }
    return {std::move(best), std::move(log)};
}

struct MetricRow {
    std::string train_source;
    std::string test_source;
    double dice = 0;
    std::vector<double> per_slice;
};

inline std::string hospital_label(const std::string& site) { return "Hospital " + site; }

// Binary prediction for one sample.
using Predictor = std::function<std::vector<std::uint8_t>(const data::Sample&)>;

// Scores real samples of one split; never train-split or synthetic data.
inline MetricRow evaluate(const Predictor& predict, const data::SiteDataset& ds, data::Split which,
                          const std::string& train_source) {
    if (which == data::Split::train) throw Error("evaluate: refusing to score the train split");
    const auto set = ds.in_split(which);
    if (set.empty()) throw Error("evaluate: no samples in the " + std::string(data::split_name(which)) + " split");
    MetricRow row{train_source, hospital_label(ds.site_id), 0, {}};
    double sum = 0;
    for (const auto& s : set) {
        if (s.provenance.synthetic) throw Error("evaluate: synthetic sample in evaluation set");
        if (ds.split_of(s.patient_id) != which) throw Error("evaluate: split tag mismatch");
        row.per_slice.push_back(dice_score(predict(s), s.mask));
        sum += row.per_slice.back();
    }
    row.dice = sum / static_cast<double>(set.size());
    return row;
}

inline MetricRow evaluate(const nn::UNetSpec& spec, const ParamTree<float>& params, const data::SiteDataset& ds,
                          data::Split which, double threshold, const std::string& train_source) {
    if (which == data::Split::train) throw Error("evaluate: refusing to score the train split");
    const auto set = ds.in_split(which);
    if (set.empty()) throw Error("evaluate: no samples in the " + std::string(data::split_name(which)) + " split");
    for (const auto& s : set) {
        if (s.provenance.synthetic) throw Error("evaluate: synthetic sample in evaluation set");
    }
    MetricRow row{train_source, hospital_label(ds.site_id), 0, {}};
    row.dice = mean_dice(spec, params, set, threshold, &row.per_slice);
    return row;
}

} // namespace fdm::seg

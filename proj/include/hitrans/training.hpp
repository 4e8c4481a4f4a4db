#pragma once

#include "hitrans/checkpoint.hpp"
#include "hitrans/data.hpp"
#include "hitrans/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace hitrans {

class TrainingError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class AlternateStrategy { off, round_robin };

struct TrainConfig {
    int epochs = 100;
    int batch_size = 2;
    int warmup_epochs = 10;
    double base_lr = 5e-4;
    double min_lr = 1e-6;
    double wd_start = 1e-2;
    double wd_end = 1e-4;
    int patience = 10;
    std::uint64_t seed = 0;
    AlternateStrategy alternate = AlternateStrategy::off;
    std::string loss = "bce";
    /// Probability cutoff for the validation Jaccard.
    double threshold = 0.5;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

double lr_at(const TrainConfig& config, int epoch);
double wd_at(const TrainConfig& config, int epoch);
ComponentSet active_components(const TrainConfig& config, int epoch);

/// Mean pixel BCE on logits.
template <typename Scalar>
Var<Scalar> loss(Tape<Scalar>& tape, const Var<Scalar>& logits, const Tensor<Scalar>& target);
template <typename Scalar>
double loss_value(const Tensor<Scalar>& logits, const Tensor<Scalar>& target);

struct TrainState {
    int epoch = 0;
    std::int64_t global_step = 0;
    double current_lr = 0.0;
    double current_wd = 0.0;
    ComponentSet active_components = ComponentSet::all();
    double best_val_metric = -std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    int epochs_since_improvement = 0;
    /// Textual mt19937_64 state used for batch shuffling.
    std::string rng_state;

    friend bool operator==(const TrainState&, const TrainState&) = default;
};

void to_json(nlohmann::json& j, const TrainState& s);
void from_json(const nlohmann::json& j, TrainState& s);

/// Adam with decoupled weight decay. Moments and step counts are kept per parameter and
/// survive while a component is frozen.
template <typename Scalar>
class AdamW {
  public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    AdamW() = default;
    explicit AdamW(const ParameterStore<Scalar>& params);

    /// Updates trainable parameters whose component is in `active`; everything else is untouched.
    void step(ParameterStore<Scalar>& params, const Gradients<Scalar>& grads, ComponentSet active, double lr,
              double wd);

    const std::vector<Tensor<Scalar>>& first_moments() const { return m_; }
    const std::vector<Tensor<Scalar>>& second_moments() const { return v_; }
    const std::vector<std::int64_t>& step_counts() const { return steps_; }

    /// Header entry and "opt.m.*" / "opt.v.*" tensors.
    void store(CheckpointData& data, const ParameterStore<Scalar>& params) const;
    void restore(const CheckpointData& data, const ParameterStore<Scalar>& params);

    friend bool operator==(const AdamW& a, const AdamW& b) {
        return a.beta1 == b.beta1 && a.beta2 == b.beta2 && a.eps == b.eps && a.m_ == b.m_ && a.v_ == b.v_ &&
               a.steps_ == b.steps_;
    }

  private:
    std::vector<Tensor<Scalar>> m_, v_;
    std::vector<std::int64_t> steps_;
};

template <typename Scalar>
Tensor<Scalar> stack_images(const std::vector<const Sample<Scalar>*>& samples);
template <typename Scalar>
Tensor<Scalar> stack_masks(const std::vector<const Sample<Scalar>*>& samples);

inline constexpr double kBatchNormMomentum = 0.1;

/// One optimizer step on `images`/`masks` at the state's lr and wd, restricted to its active components.
/// Batch-norm running statistics of active components move by kBatchNormMomentum.
/// Returns the batch loss; a non-finite loss throws TrainingError before anything is modified.
template <typename Scalar>
double train_step(Model<Scalar>& model, AdamW<Scalar>& optimizer, TrainState& state, const Tensor<Scalar>& images,
                  const Tensor<Scalar>& masks);

/// Patience counter on a metric where larger is better.
class EarlyStopping {
  public:
    explicit EarlyStopping(int patience) : patience_(patience) {}

    /// Records one epoch's metric; true when it strictly beats the best so far.
    bool update(int epoch, double metric);
    bool should_stop() const { return since_ >= patience_; }

    double best() const { return best_; }
    int best_epoch() const { return best_epoch_; }
    int epochs_since_improvement() const { return since_; }
    void restore(double best, int best_epoch, int since) {
        best_ = best;
        best_epoch_ = best_epoch;
        since_ = since;
    }

  private:
    int patience_;
    double best_ = -std::numeric_limits<double>::infinity();
    int best_epoch_ = -1;
    int since_ = 0;
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double wd = 0.0;
    double train_loss = 0.0;
    double val_jaccard = 0.0;
    ComponentSet active_components;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

/// Mean per-sample Jaccard of thresholded eval-mode predictions.
template <typename Scalar>
double mean_patch_jaccard(const Model<Scalar>& model, const std::vector<Sample<Scalar>>& samples, double threshold,
                          int batch_size);

template <typename Scalar>
struct FitOptions {
    /// When set, history.jsonl, best.ckpt and last.ckpt are written here as training proceeds.
    std::optional<std::filesystem::path> out_dir;
    /// Overrides the validation metric; receives the model after each epoch.
    std::function<double(const Model<Scalar>&, int epoch)> validation_metric;
    std::function<void(const EpochRecord&)> on_epoch;
    /// Continues a run from a saved training checkpoint.
    std::optional<std::pair<AdamW<Scalar>, TrainState>> resume;
};

template <typename Scalar>
struct FitResult {
    Model<Scalar> best_model;
    std::vector<EpochRecord> history;
    TrainState state;
    AdamW<Scalar> optimizer;
};

template <typename Scalar>
FitResult<Scalar> fit(Model<Scalar> model, const std::vector<Sample<Scalar>>& train,
                      const std::vector<Sample<Scalar>>& val, const TrainConfig& config,
                      FitOptions<Scalar> options = {});

template <typename Scalar>
struct TrainingCheckpoint {
    Model<Scalar> model;
    AdamW<Scalar> optimizer;
    TrainState state;
    std::optional<TrainConfig> config;
};

template <typename Scalar>
void save_checkpoint(const Model<Scalar>& model, const AdamW<Scalar>& optimizer, const TrainState& state,
                     const std::filesystem::path& path, const std::optional<TrainConfig>& config = std::nullopt);
template <typename Scalar>
TrainingCheckpoint<Scalar> load_checkpoint(const std::filesystem::path& path);

}  // namespace hitrans

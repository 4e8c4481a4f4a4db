#include "hitrans/training.hpp"

#include "hitrans/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace hitrans {

namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const char* what) {
    if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) throw ConfigError(std::string("unknown ") + what + " key '" + key + "'");
    }
}

void check_epoch(const TrainConfig& c, int epoch, const char* fn) {
    if (epoch < 0 || epoch > c.epochs) {
        throw std::out_of_range(std::string(fn) + ": epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(c.epochs) + "]");
    }
}

std::string_view strategy_name(AlternateStrategy s) { return s == AlternateStrategy::off ? "off" : "round_robin"; }

AlternateStrategy parse_strategy(const std::string& s) {
    if (s == "off") return AlternateStrategy::off;
    if (s == "round_robin") return AlternateStrategy::round_robin;
    throw ConfigError("alternate must be 'off' or 'round_robin', got '" + s + "'");
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be in [0, epochs)");
    if (!(min_lr > 0.0) || !(min_lr <= base_lr)) throw ConfigError("need 0 < min_lr <= base_lr");
    if (!(wd_start >= 0.0) || !(wd_end >= 0.0)) throw ConfigError("weight decay must be non-negative");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (loss != "bce") throw ConfigError("loss must be 'bce', got '" + loss + "'");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must be in (0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"warmup_epochs", c.warmup_epochs},
                       {"base_lr", c.base_lr},
                       {"min_lr", c.min_lr},
                       {"wd_start", c.wd_start},
                       {"wd_end", c.wd_end},
                       {"patience", c.patience},
                       {"seed", c.seed},
                       {"alternate", std::string(strategy_name(c.alternate))},
                       {"loss", c.loss},
                       {"threshold", c.threshold}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    check_keys(j,
               {"epochs", "batch_size", "warmup_epochs", "base_lr", "min_lr", "wd_start", "wd_end", "patience",
                "seed", "alternate", "loss", "threshold"},
               "train");
    try {
        if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
        if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
        if (j.contains("warmup_epochs")) j.at("warmup_epochs").get_to(c.warmup_epochs);
        if (j.contains("base_lr")) j.at("base_lr").get_to(c.base_lr);
        if (j.contains("min_lr")) j.at("min_lr").get_to(c.min_lr);
        if (j.contains("wd_start")) j.at("wd_start").get_to(c.wd_start);
        if (j.contains("wd_end")) j.at("wd_end").get_to(c.wd_end);
        if (j.contains("patience")) j.at("patience").get_to(c.patience);
        if (j.contains("seed")) j.at("seed").get_to(c.seed);
        if (j.contains("alternate")) c.alternate = parse_strategy(j.at("alternate").get<std::string>());
        if (j.contains("loss")) j.at("loss").get_to(c.loss);
        if (j.contains("threshold")) j.at("threshold").get_to(c.threshold);
    } catch (const nlohmann::json::type_error& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
}

double lr_at(const TrainConfig& c, int epoch) {
    check_epoch(c, epoch, "lr_at");
    if (epoch < c.warmup_epochs) return c.base_lr * epoch / c.warmup_epochs;
    const double t = static_cast<double>(epoch - c.warmup_epochs) / (c.epochs - c.warmup_epochs);
    return c.min_lr + 0.5 * (c.base_lr - c.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

double wd_at(const TrainConfig& c, int epoch) {
    check_epoch(c, epoch, "wd_at");
    const double t = static_cast<double>(epoch) / c.epochs;
    return c.wd_end + 0.5 * (c.wd_start - c.wd_end) * (1.0 + std::cos(std::numbers::pi * t));
}

ComponentSet active_components(const TrainConfig& c, int epoch) {
    if (c.alternate == AlternateStrategy::off) return ComponentSet::all();
    static constexpr std::array<Component, 3> cycle{Component::backbone, Component::tr1, Component::tr2};
    return ComponentSet{cycle[static_cast<std::size_t>(epoch % 3)], Component::decoder};
}

template <typename Scalar>
Var<Scalar> loss(Tape<Scalar>& tape, const Var<Scalar>& logits, const Tensor<Scalar>& target) {
    return ops::bce_with_logits(tape, logits, target);
}

template <typename Scalar>
double loss_value(const Tensor<Scalar>& logits, const Tensor<Scalar>& target) {
    Tape<Scalar> tape;
    return static_cast<double>(ops::bce_with_logits(tape, tape.leaf(logits), target)->value[0]);
}

void to_json(nlohmann::json& j, const TrainState& s) {
    j = nlohmann::json{{"epoch", s.epoch},
                       {"global_step", s.global_step},
                       {"current_lr", s.current_lr},
                       {"current_wd", s.current_wd},
                       {"active_components", s.active_components.names()},
                       {"best_epoch", s.best_epoch},
                       {"epochs_since_improvement", s.epochs_since_improvement},
                       {"rng_state", s.rng_state}};
    // JSON has no infinities; "no best yet" is null.
    if (std::isfinite(s.best_val_metric)) {
        j["best_val_metric"] = s.best_val_metric;
    } else {
        j["best_val_metric"] = nullptr;
    }
}

void from_json(const nlohmann::json& j, TrainState& s) {
    j.at("epoch").get_to(s.epoch);
    j.at("global_step").get_to(s.global_step);
    j.at("current_lr").get_to(s.current_lr);
    j.at("current_wd").get_to(s.current_wd);
    s.active_components = ComponentSet::from_names(j.at("active_components").get<std::vector<std::string>>());
    const auto& best = j.at("best_val_metric");
    s.best_val_metric = best.is_null() ? -std::numeric_limits<double>::infinity() : best.get<double>();
    j.at("best_epoch").get_to(s.best_epoch);
    j.at("epochs_since_improvement").get_to(s.epochs_since_improvement);
    j.at("rng_state").get_to(s.rng_state);
}

template <typename Scalar>
AdamW<Scalar>::AdamW(const ParameterStore<Scalar>& params) {
    for (const auto& p : params) {
        m_.emplace_back(p.value.shape());
        v_.emplace_back(p.value.shape());
    }
    steps_.assign(params.size(), 0);
}

template <typename Scalar>
void AdamW<Scalar>::step(ParameterStore<Scalar>& params, const Gradients<Scalar>& grads, ComponentSet active,
                         double lr, double wd) {
    if (m_.size() != params.size() || grads.size() != params.size()) {
        throw TrainingError("optimizer state does not match the parameter store");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.trainable || !active.contains(p.component)) continue;
        const auto g = grads[i].values().array();
        auto m = m_[i].values().array();
        auto v = v_[i].values().array();
        const std::int64_t t = ++steps_[i];
        m = Scalar(beta1) * m + Scalar(1.0 - beta1) * g;
        v = Scalar(beta2) * v + Scalar(1.0 - beta2) * g.square();
        const Scalar c1 = Scalar(1.0 - std::pow(beta1, static_cast<double>(t)));
        const Scalar c2 = Scalar(1.0 - std::pow(beta2, static_cast<double>(t)));
        auto w = p.value.values().array();
        w *= Scalar(1.0 - lr * wd);
        w -= Scalar(lr) * (m / c1) / ((v / c2).sqrt() + Scalar(eps));
    }
}

template <typename Scalar>
void AdamW<Scalar>::store(CheckpointData& data, const ParameterStore<Scalar>& params) const {
    nlohmann::json steps = nlohmann::json::object();
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].trainable) continue;
        steps[params[i].name] = steps_[i];
        data.tensors["opt.m." + params[i].name] = m_[i].template cast<float>();
        data.tensors["opt.v." + params[i].name] = v_[i].template cast<float>();
    }
    data.header["optimizer"] = {{"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"steps", steps}};
}

template <typename Scalar>
void AdamW<Scalar>::restore(const CheckpointData& data, const ParameterStore<Scalar>& params) {
    if (!data.header.contains("optimizer")) throw CheckpointError("checkpoint has no optimizer state");
    const auto& h = data.header.at("optimizer");
    *this = AdamW(params);
    h.at("beta1").get_to(beta1);
    h.at("beta2").get_to(beta2);
    h.at("eps").get_to(eps);
    const auto& steps = h.at("steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].trainable) continue;
        const auto& name = params[i].name;
        auto m = data.tensors.find("opt.m." + name);
        auto v = data.tensors.find("opt.v." + name);
        if (m == data.tensors.end() || v == data.tensors.end() || !steps.contains(name)) {
            throw CheckpointError("checkpoint lacks optimizer state for " + name);
        }
        if (m->second.shape() != params[i].value.shape() || v->second.shape() != params[i].value.shape()) {
            throw CheckpointError("optimizer state for " + name + " has the wrong shape");
        }
        m_[i] = m->second.template cast<Scalar>();
        v_[i] = v->second.template cast<Scalar>();
        steps_[i] = steps.at(name).template get<std::int64_t>();
    }
}

template <typename Scalar>
Tensor<Scalar> stack_images(const std::vector<const Sample<Scalar>*>& samples) {
    if (samples.empty()) throw ShapeError("stack_images: empty batch");
    auto shape = samples.front()->image.shape();
    const Index per = samples.front()->image.size();
    shape.insert(shape.begin(), static_cast<Index>(samples.size()));
    Tensor<Scalar> out(shape);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        require_shape(samples[i]->image, samples.front()->image.shape(), "stack_images");
        out.values().segment(static_cast<Index>(i) * per, per) = samples[i]->image.values();
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> stack_masks(const std::vector<const Sample<Scalar>*>& samples) {
    if (samples.empty()) throw ShapeError("stack_masks: empty batch");
    auto shape = samples.front()->mask.shape();
    const Index per = samples.front()->mask.size();
    shape.insert(shape.begin(), static_cast<Index>(samples.size()));
    Tensor<Scalar> out(shape);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        require_shape(samples[i]->mask, samples.front()->mask.shape(), "stack_masks");
        out.values().segment(static_cast<Index>(i) * per, per) = samples[i]->mask.values();
    }
    return out;
}

template <typename Scalar>
double train_step(Model<Scalar>& model, AdamW<Scalar>& optimizer, TrainState& state, const Tensor<Scalar>& images,
                  const Tensor<Scalar>& masks) {
    if (state.active_components.empty()) throw TrainingError("train_step: no active components");
    Gradients<Scalar> grads(model.parameters());
    Tape<Scalar> tape(&grads, state.active_components);
    auto trace = model.run(tape, images, Mode::train);
    auto l = loss(tape, trace.logits, masks);
    const double value = static_cast<double>(l->value[0]);
    if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite loss " << value << " at epoch " << state.epoch << ", step " << state.global_step;
        throw TrainingError(msg.str());
    }
    tape.backward(l);
    optimizer.step(model.parameters(), grads, state.active_components, state.current_lr, state.current_wd);

    auto& params = model.parameters();
    const Scalar mom = Scalar(kBatchNormMomentum);
    for (const auto& s : trace.batch_stats) {
        if (!state.active_components.contains(params[s.running_mean_id].component)) continue;
        auto& rm = params[s.running_mean_id].value.values();
        auto& rv = params[s.running_var_id].value.values();
        rm = (Scalar(1) - mom) * rm + mom * s.mean;
        rv = (Scalar(1) - mom) * rv + mom * s.var;
    }
    ++state.global_step;
    return value;
}

bool EarlyStopping::update(int epoch, double metric) {
    if (metric > best_) {
        best_ = metric;
        best_epoch_ = epoch;
        since_ = 0;
        return true;
    }
    ++since_;
    return false;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
    j = nlohmann::json{{"epoch", r.epoch},           {"lr", r.lr},
                       {"wd", r.wd},                 {"train_loss", r.train_loss},
                       {"val_jaccard", r.val_jaccard}, {"active_components", r.active_components.names()}};
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
    j.at("epoch").get_to(r.epoch);
    j.at("lr").get_to(r.lr);
    j.at("wd").get_to(r.wd);
    j.at("train_loss").get_to(r.train_loss);
    j.at("val_jaccard").get_to(r.val_jaccard);
    r.active_components = ComponentSet::from_names(j.at("active_components").get<std::vector<std::string>>());
}

template <typename Scalar>
double mean_patch_jaccard(const Model<Scalar>& model, const std::vector<Sample<Scalar>>& samples, double threshold,
                          int batch_size) {
    if (samples.empty()) throw TrainingError("mean_patch_jaccard: no samples");
    double total = 0.0;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<const Sample<Scalar>*> batch;
        for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) batch.push_back(&samples[i]);
        const auto logits = forward(model, stack_images(batch));
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Mask pred = threshold_logits(logits.matrix(static_cast<Index>(b)), threshold);
            const Mask truth = (batch[b]->mask.matrix(0).array() > Scalar(0.5)).template cast<std::uint8_t>();
            total += jaccard(pred, truth);
        }
    }
    return total / static_cast<double>(samples.size());
}

namespace {

std::string rng_to_string(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

std::mt19937_64 rng_from_string(const std::string& s) {
    std::mt19937_64 rng;
    std::istringstream is(s);
    is >> rng;
    if (!is) throw CheckpointError("corrupt shuffling RNG state");
    return rng;
}

}  // namespace

template <typename Scalar>
FitResult<Scalar> fit(Model<Scalar> model, const std::vector<Sample<Scalar>>& train,
                      const std::vector<Sample<Scalar>>& val, const TrainConfig& config, FitOptions<Scalar> options) {
    config.validate();
    if (train.empty()) throw TrainingError("fit: training set is empty");
    if (val.empty() && !options.validation_metric) throw TrainingError("fit: validation set is empty");

    AdamW<Scalar> optimizer(model.parameters());
    TrainState state;
    std::mt19937_64 rng(config.seed);
    EarlyStopping stopper(config.patience);
    int start_epoch = 0;
    if (options.resume) {
        optimizer = options.resume->first;
        state = options.resume->second;
        rng = rng_from_string(state.rng_state);
        stopper.restore(state.best_val_metric, state.best_epoch, state.epochs_since_improvement);
        start_epoch = state.epoch + 1;
    }

    FitResult<Scalar> result{model, {}, state, optimizer};
    std::ofstream history_file;
    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        const auto path = *options.out_dir / "history.jsonl";
        if (options.resume && std::filesystem::exists(path)) {
            std::ifstream in(path);
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                auto rec = nlohmann::json::parse(line).get<EpochRecord>();
                if (rec.epoch < start_epoch) result.history.push_back(rec);
            }
        }
        history_file.open(path, std::ios::trunc);
        if (!history_file) throw TrainingError("cannot write " + path.string());
        for (const auto& rec : result.history) history_file << nlohmann::json(rec).dump() << '\n';
        history_file.flush();
        const auto best_path = *options.out_dir / "best.ckpt";
        if (options.resume && std::filesystem::exists(best_path)) {
            result.best_model = load_checkpoint<Scalar>(best_path).model;
        }
    }

    std::vector<std::size_t> order(train.size());
    for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
        state.epoch = epoch;
        state.current_lr = lr_at(config, epoch);
        state.current_wd = wd_at(config, epoch);
        state.active_components = active_components(config, epoch);

        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            std::vector<const Sample<Scalar>*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
                batch.push_back(&train[order[i]]);
            }
            loss_sum += train_step(model, optimizer, state, stack_images(batch), stack_masks(batch)) *
                        static_cast<double>(batch.size());
        }

        const double metric = options.validation_metric
                                  ? options.validation_metric(model, epoch)
                                  : mean_patch_jaccard(model, val, config.threshold, config.batch_size);
        const bool improved = stopper.update(epoch, metric);
        state.best_val_metric = stopper.best();
        state.best_epoch = stopper.best_epoch();
        state.epochs_since_improvement = stopper.epochs_since_improvement();
        state.rng_state = rng_to_string(rng);

        EpochRecord rec{epoch, state.current_lr, state.current_wd, loss_sum / static_cast<double>(train.size()), metric,
                        state.active_components};
        result.history.push_back(rec);
        if (improved) result.best_model = model;
        if (options.out_dir) {
            history_file << nlohmann::json(rec).dump() << '\n';
            history_file.flush();
            if (improved) save_checkpoint(model, optimizer, state, *options.out_dir / "best.ckpt", config);
            save_checkpoint(model, optimizer, state, *options.out_dir / "last.ckpt", config);
        }
        if (options.on_epoch) options.on_epoch(rec);
        if (stopper.should_stop()) break;
    }
    result.state = state;
    result.optimizer = optimizer;
    return result;
}

template <typename Scalar>
void save_checkpoint(const Model<Scalar>& model, const AdamW<Scalar>& optimizer, const TrainState& state,
                     const std::filesystem::path& path, const std::optional<TrainConfig>& config) {
    auto data = model_checkpoint(model);
    optimizer.store(data, model.parameters());
    data.header["train_state"] = state;
    if (config) data.header["train_config"] = *config;
    write_checkpoint_file(path, data);
}

template <typename Scalar>
TrainingCheckpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
    const auto data = read_checkpoint_file(path);
    auto model = model_from_checkpoint<Scalar>(data);
    AdamW<Scalar> optimizer;
    optimizer.restore(data, model.parameters());
    if (!data.header.contains("train_state")) throw CheckpointError("checkpoint has no train_state");
    TrainState state;
    std::optional<TrainConfig> config;
    try {
        state = data.header.at("train_state").get<TrainState>();
        if (data.header.contains("train_config")) config = data.header.at("train_config").get<TrainConfig>();
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("bad training header: ") + e.what());
    }
    return TrainingCheckpoint<Scalar>{std::move(model), std::move(optimizer), std::move(state), std::move(config)};
}

#define HITRANS_INSTANTIATE(S)                                                                                      \
    template Var<S> loss<S>(Tape<S>&, const Var<S>&, const Tensor<S>&);                                             \
    template double loss_value<S>(const Tensor<S>&, const Tensor<S>&);                                              \
    template class AdamW<S>;                                                                                        \
    template Tensor<S> stack_images<S>(const std::vector<const Sample<S>*>&);                                       \
    template Tensor<S> stack_masks<S>(const std::vector<const Sample<S>*>&);                                        \
    template double train_step<S>(Model<S>&, AdamW<S>&, TrainState&, const Tensor<S>&, const Tensor<S>&);           \
    template double mean_patch_jaccard<S>(const Model<S>&, const std::vector<Sample<S>>&, double, int);             \
    template FitResult<S> fit<S>(Model<S>, const std::vector<Sample<S>>&, const std::vector<Sample<S>>&,            \
                                 const TrainConfig&, FitOptions<S>);                                                \
    template void save_checkpoint<S>(const Model<S>&, const AdamW<S>&, const TrainState&,                           \
                                     const std::filesystem::path&, const std::optional<TrainConfig>&);              \
    template TrainingCheckpoint<S> load_checkpoint<S>(const std::filesystem::path&);

HITRANS_INSTANTIATE(float)
HITRANS_INSTANTIATE(double)

}  // namespace hitrans

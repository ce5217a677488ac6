#include "regvit/train.hpp"

#include <cmath>
#include <numeric>

#include "regvit/errors.hpp"
#include "regvit/parallel.hpp"
#include "regvit/report.hpp"
#include "regvit/rng.hpp"

namespace regvit {

namespace {

constexpr double kPi = 3.141592653589793;

struct AdamState {
  std::vector<Tensor> first;
  std::vector<Tensor> second;
};

std::vector<Tensor*> param_slots(Params& params) {
  std::vector<Tensor*> slots;
  params.for_each([&](const std::string&, Tensor& t) { slots.push_back(&t); });
  return slots;
}

std::vector<bool> decay_mask(const Params& params) {
  std::vector<bool> mask;
  params.for_each([&](const std::string& name, const Tensor&) {
    mask.push_back(name.size() >= 7 && name.compare(name.size() - 7, 7, ".weight") == 0);
  });
  return mask;
}

std::size_t argmax(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.numel(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

void check_compatible(const ModelConfig& model, const Dataset& dataset) {
  for (const auto& s : dataset) {
    if (s.image.shape() != Shape{model.channels, model.image_size, model.image_size}) {
      throw CheckpointError("image shape " + shape_to_string(s.image.shape()) + " does not match model input " +
                            shape_to_string({model.channels, model.image_size, model.image_size}));
    }
    if (s.label >= model.n_classes) {
      throw CheckpointError("label " + std::to_string(s.label) + " exceeds model classes " +
                            std::to_string(model.n_classes));
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (lr < 0.0) throw ConfigError("lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (batch_size == 0 || steps == 0 || checkpoint_every == 0) {
    throw ConfigError("batch_size, steps and checkpoint_every must be positive");
  }
}

ModelConfig toy_model_config() {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.depth = 2;
  c.heads = 2;
  return c;
}

std::string checkpoint_dir_name(std::size_t step) {
  std::string digits = std::to_string(step);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return "step_" + digits;
}

TrainResult train(const ModelConfig& model, const TrainConfig& config, const Dataset& dataset,
                  const std::optional<std::filesystem::path>& out_dir) {
  model.validate();
  config.validate();
  if (dataset.empty()) throw DataError("training dataset is empty");
  check_compatible(model, dataset);

  TrainResult result;
  result.params = init_params(model, derive_seed(config.seed, 0));
  Rng sampler(derive_seed(config.seed, 1));
  const std::vector<bool> decay = decay_mask(result.params);

  AdamState adam;
  result.params.for_each([&](const std::string&, const Tensor& t) {
    adam.first.emplace_back(t.shape(), 0.0);
    adam.second.emplace_back(t.shape(), 0.0);
  });

  auto snapshot = [&](std::size_t step, const Params& params, const std::string& name) {
    Snapshot snap{step, params, {}};
    if (out_dir) {
      snap.path = *out_dir / name;
      save_checkpoint(snap.path, model, params);
    }
    return snap;
  };
  result.checkpoints.push_back(snapshot(0, result.params, checkpoint_dir_name(0)));

  // Epoch-wise shuffled order; batches wrap across epochs.
  std::vector<std::size_t> order(dataset.size());
  std::size_t cursor = order.size();
  auto next_index = [&]() {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i-- > 1;) {
        std::swap(order[i], order[static_cast<std::size_t>(sampler.uniform_int(0, static_cast<std::int64_t>(i)))]);
      }
      cursor = 0;
    }
    return order[cursor++];
  };

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<Tensor> grads;
    result.params.for_each([&](const std::string&, const Tensor& t) { grads.emplace_back(t.shape(), 0.0); });
    double loss_sum = 0.0;
    std::size_t correct = 0;
    bool finite = true;
    for (std::size_t b = 0; b < config.batch_size && finite; ++b) {
      const Sample& sample = dataset[next_index()];
      try {
        ad::Tape tape;
        BoundParams bound = bind_params(tape, result.params, true);
        ad::Var tokens = graph::encoder(bound, model,
                                        graph::assemble_sequence(bound, model, graph::patch_embed(tape, bound, model, sample.image)),
                                        nullptr);
        ad::Var logits = ad::reshape(graph::classify(bound, model, tokens), {model.n_classes});
        ad::Var loss = ad::cross_entropy(logits, sample.label);
        if (!std::isfinite(loss.value().item())) {
          finite = false;
          break;
        }
        loss_sum += loss.value().item();
        if (argmax(logits.value()) == sample.label) ++correct;
        const auto g = ad::backward(tape, loss);
        std::size_t i = 0;
        bound.for_each([&](const std::string&, ad::Var& v) {
          auto dst = grads[i++].data();
          const auto src = g[v].data();
          for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        });
      } catch (const NumericError&) {
        finite = false;
      }
    }
    if (!finite) {
      std::string last_good;
      if (out_dir) {
        last_good = (*out_dir / "last_good").string();
        save_checkpoint(*out_dir / "last_good", model, result.params);
      }
      throw DivergenceError("loss became non-finite at step " + std::to_string(step), last_good);
    }

    const double batch = static_cast<double>(config.batch_size);
    result.log.push_back({step, loss_sum / batch, static_cast<double>(correct) / batch});

    const double lr = config.lr * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(step) / static_cast<double>(config.steps)));
    const double t = static_cast<double>(step + 1);
    const double bias1 = 1.0 - std::pow(config.beta1, t);
    const double bias2 = 1.0 - std::pow(config.beta2, t);
    auto slots = param_slots(result.params);
    for (std::size_t i = 0; i < slots.size(); ++i) {
      auto p = slots[i]->data();
      auto m = adam.first[i].data();
      auto v = adam.second[i].data();
      const auto g = grads[i].data();
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k] / batch;
        m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
        v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
        const double update = (m[k] / bias1) / (std::sqrt(v[k] / bias2) + config.adam_eps);
        p[k] -= lr * (update + (decay[i] ? config.weight_decay * p[k] : 0.0));
      }
    }

    const std::size_t done = step + 1;
    if (done % config.checkpoint_every == 0 || done == config.steps) {
      result.checkpoints.push_back(snapshot(done, result.params, checkpoint_dir_name(done)));
    }
  }
  return result;
}

double evaluate(const Params& params, const ModelConfig& model, const Dataset& dataset) {
  check_params(model, params);
  if (dataset.empty()) throw DataError("evaluation dataset is empty");
  check_compatible(model, dataset);
  std::vector<unsigned char> hit(dataset.size(), 0);
  parallel_for(dataset.size(), [&](std::size_t i) {
    const ForwardTrace trace = run_model(dataset[i].image, params, model, false);
    hit[i] = argmax(trace.logits) == dataset[i].label ? 1 : 0;
  });
  const auto correct = std::accumulate(hit.begin(), hit.end(), std::size_t{0});
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

std::string metric_log_csv(const std::vector<LogRow>& log) {
  CsvWriter csv({"step", "loss", "accuracy"});
  for (const auto& row : log) csv.row({std::to_string(row.step), format_double(row.loss), format_double(row.accuracy)});
  return csv.str();
}

}  // namespace regvit

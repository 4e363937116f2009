#include "oeseg/sweep.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <ostream>
#include <thread>

#include "oeseg/coreset.hpp"
#include "oeseg/error.hpp"
#include "oeseg/pretrain.hpp"
#include "oeseg/rng.hpp"
#include "oeseg/segdec.hpp"

namespace oeseg {

std::size_t resolve_budget(const std::string& token, std::size_t m) {
  if (token.empty()) throw ConfigError("budget: empty token");
  try {
    if (token.back() == '%') {
      double pct = std::stod(token.substr(0, token.size() - 1));
      if (pct <= 0.0 || pct > 100.0) throw ConfigError("budget: percent outside (0, 100]");
      return static_cast<std::size_t>(
          std::llround(pct / 100.0 * static_cast<double>(m)));
    }
    long v = std::stol(token);
    if (v <= 0) throw ConfigError("budget: must be positive");
    return static_cast<std::size_t>(v);
  } catch (const std::invalid_argument&) {
    throw ConfigError("budget: cannot parse '" + token + "'");
  } catch (const std::out_of_range&) {
    throw ConfigError("budget: out of range '" + token + "'");
  }
}

int effective_worker_count(int requested) {
  int n = requested;
  if (n <= 0) {
    if (const char* env = std::getenv("OESEG_THREADS")) {
      n = std::atoi(env);
    }
  }
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  return std::max(1, n);
}

namespace {

struct SeedOutcome {
  // keyed by (budget index, strategy index)
  std::vector<SweepRow> rows;
};

SelectionManifest select_all(const DatasetIndex& index, Strategy tag) {
  SelectionManifest m;
  m.strategy = tag;
  m.budget = index.size();
  m.selected = index.flat;
  return m;
}

// Test-scan DSC with the frozen-encoder taps computed once per seed.
struct CachedEval {
  std::vector<std::map<int, Tensor>> taps;
  std::vector<Tensor> masks;

  std::pair<double, double> run(SegDecoderWeights& dec, double threshold = 0.5) const {
    std::vector<double> scores;
    scores.reserve(taps.size());
    for (std::size_t i = 0; i < taps.size(); ++i) {
      SegPrediction pred = seg_forward(taps[i], dec, RunMode::kInfer);
      scores.push_back(dsc(binarize(pred.probabilities, threshold), masks[i]));
    }
    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= static_cast<double>(scores.size());
    double var = 0.0;
    for (double s : scores) var += (s - mean) * (s - mean);
    var /= static_cast<double>(scores.size());
    return {mean, std::sqrt(var)};
  }
};

SeedOutcome run_seed(const SweepConfig& cfg, const Dataset* fixed_data,
                     const EncoderWeights* fixed_encoder, int seed_index) {
  std::uint64_t seed = cfg.base_seed + static_cast<std::uint64_t>(seed_index);

  Dataset data;
  if (fixed_data) {
    data = *fixed_data;
  } else {
    SynthSpec spec = cfg.synth;
    spec.seed = mix_seed(cfg.synth.seed, 0xda7aULL, seed);
    data = generate(spec);
  }
  DatasetIndex index = index_dataset(data);
  CaseSplit split = split_cases(index, cfg.train_fraction, seed);
  Dataset train_data = filter_cases(data, split.train_cases);
  Dataset test_data = filter_cases(data, split.test_cases);
  DatasetIndex train_index = index_dataset(train_data);
  std::size_t m = train_index.size();

  EncoderWeights encoder =
      fixed_encoder ? *fixed_encoder
                    : EncoderWeights::random_init(cfg.encoder, mix_seed(seed, 0xe1cULL));
  if (!fixed_encoder && cfg.pretrain_epochs > 0) {
    PretrainConfig pc;
    pc.epochs = cfg.pretrain_epochs;
    pc.learning_rate = cfg.pretrain_lr;
    pc.mask_ratio = cfg.pretrain_mask_ratio;
    pc.seed = seed;
    encoder = pretrain_reconstruction(cfg.encoder, MaeConfig::desk(), train_data, pc).encoder;
  }
  SegDecoderWeights decoder = SegDecoderWeights::random_init(
      SegDecoderConfig::from_encoder(encoder.cfg), mix_seed(seed, 0xd2cULL));

  bool need_features = false;
  for (Strategy s : cfg.strategies) {
    if (s == Strategy::kCoreset) need_features = true;
  }
  std::vector<FeatureVector> features;
  if (need_features) {
    features = extract_features(train_data, encoder, encoder.cfg, cfg.pooling);
  }

  CachedEval eval_cache;
  int stride = std::max(1, cfg.eval_stride);
  for (const BScanRecord& r : test_data) {
    if (r.scan_index % stride != 0) continue;
    eval_cache.taps.push_back(encoder_taps(encoder, r.image));
    eval_cache.masks.push_back(r.mask);
  }
  if (eval_cache.taps.empty()) throw ConfigError("sweep: eval stride left no test scans");

  TrainConfig tc = cfg.train;
  tc.seed = seed;

  SeedOutcome outcome;
  // Full-budget runs are strategy-independent (every scan is selected);
  // train once and replicate the row.
  std::optional<SweepRow> full_row;

  auto run_one = [&](const SelectionManifest& manifest, SweepRow& row) {
    FinetuneResult ft = finetune(encoder, decoder, manifest, train_data, tc);
    double mean, stddev;
    if (tc.freeze_policy == FreezePolicy::kDecoderOnly) {
      std::tie(mean, stddev) = eval_cache.run(ft.decoder);  // encoder unchanged
    } else {
      Dataset strided;
      for (const BScanRecord& r : test_data) {
        if (r.scan_index % stride == 0) strided.push_back(r);
      }
      EvalResult ev = evaluate(ft.encoder, ft.decoder, strided);
      mean = ev.mean;
      stddev = ev.stddev;
    }
    double secs = 0.0;
    for (const auto& e : ft.history.epochs) secs += e.seconds;
    row.mean_dsc = mean;
    row.std_dsc = stddev;
    row.train_seconds = secs;
  };

  for (const std::string& budget : cfg.budgets) {
    std::size_t s = resolve_budget(budget, m);
    for (Strategy strategy : cfg.strategies) {
      SweepRow row;
      row.budget = budget;
      row.strategy = strategy;
      row.seed = seed;
      if (s >= m) {
        if (s > m) throw BudgetError("sweep: budget " + budget + " exceeds the training split");
        if (!full_row) {
          full_row = row;
          run_one(select_all(train_index, strategy), *full_row);
        }
        row.mean_dsc = full_row->mean_dsc;
        row.std_dsc = full_row->std_dsc;
        row.train_seconds = full_row->train_seconds;
      } else {
        SelectionManifest manifest;
        switch (strategy) {
          case Strategy::kCoreset:
            manifest = select_coreset(train_index, features, s);
            break;
          case Strategy::kRandom:
            manifest = select_random(train_index, s, seed);
            break;
          case Strategy::kUniform:
            manifest = select_uniform(train_index, s);
            break;
        }
        run_one(manifest, row);
      }
      outcome.rows.push_back(std::move(row));
    }
  }
  return outcome;
}

}  // namespace

std::vector<SweepRow> run_sweep(const SweepConfig& cfg, const Dataset* fixed_data,
                                const EncoderWeights* fixed_encoder, std::ostream* log) {
  if (cfg.seeds < 1) throw ConfigError("sweep: need at least one seed");
  if (cfg.budgets.empty() || cfg.strategies.empty()) {
    throw ConfigError("sweep: budgets and strategies must be nonempty");
  }

  int workers = std::min(effective_worker_count(cfg.threads), cfg.seeds);
  std::vector<SeedOutcome> outcomes(static_cast<std::size_t>(cfg.seeds));
  std::atomic<int> next{0};
  std::mutex log_mutex;
  std::vector<std::string> errors;

  auto worker = [&]() {
    for (;;) {
      int i = next.fetch_add(1);
      if (i >= cfg.seeds) return;
      try {
        outcomes[static_cast<std::size_t>(i)] = run_seed(cfg, fixed_data, fixed_encoder, i);
        if (log) {
          std::lock_guard<std::mutex> lock(log_mutex);
          *log << "sweep: seed " << cfg.base_seed + static_cast<std::uint64_t>(i) << " done ("
               << outcomes[static_cast<std::size_t>(i)].rows.size() << " runs)\n";
        }
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(log_mutex);
        errors.push_back(e.what());
        return;
      }
    }
  };

  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (!errors.empty()) throw Error("sweep: " + errors.front());

  // Canonical row order: budget, strategy (config order), then seed.
  std::vector<SweepRow> rows;
  for (std::size_t b = 0; b < cfg.budgets.size(); ++b) {
    for (std::size_t st = 0; st < cfg.strategies.size(); ++st) {
      for (int i = 0; i < cfg.seeds; ++i) {
        rows.push_back(outcomes[static_cast<std::size_t>(i)]
                           .rows[b * cfg.strategies.size() + st]);
      }
    }
  }
  return rows;
}

}  // namespace oeseg

// oeseg: annotation-efficient OCT-style segmentation pipeline.
//
// Subcommands cover the full workflow: synthetic data generation, feature
// extraction, annotation-budget selection, toy masked-reconstruction
// pretraining, fine-tuning, evaluation, budget sweeps, and report
// rendering. Exit codes: 0 success, 1 data/contract errors, 2 usage.

#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "oeseg/coreset.hpp"
#include "oeseg/error.hpp"
#include "oeseg/io.hpp"
#include "oeseg/pretrain.hpp"
#include "oeseg/sweep.hpp"
#include "oeseg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace oeseg;

namespace {

// Flat-JSON config files mirroring the command flags; flags win.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override {
    return "{}";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j = json::parse(input, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw CLI::FileError("config file is not a JSON object");
    }
    std::vector<CLI::ConfigItem> items;
    for (auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      item.name = key;
      if (value.is_array()) {
        for (auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  }
};

void add_config_flag(CLI::App* sub) {
  sub->set_config("--config", "", "JSON file mirroring the flags (flags take precedence)");
  sub->config_formatter(std::make_shared<JsonConfig>());
}

EncoderConfig preset_by_name(const std::string& name) {
  if (name == "desk") return EncoderConfig::desk();
  if (name == "vit-large") return EncoderConfig::vit_large();
  throw ConfigError("unknown preset '" + name + "'");
}

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : csv) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

EncoderWeights load_or_init_encoder(const std::string& weights_path, const std::string& preset,
                                    std::uint64_t seed) {
  if (!weights_path.empty()) {
    ModelBundle bundle = load_models(weights_path);
    if (!bundle.encoder) throw FormatError(weights_path + " holds no encoder weights");
    return std::move(*bundle.encoder);
  }
  return EncoderWeights::random_init(preset_by_name(preset), seed);
}

Dataset dataset_from_cache_or_dir(const std::string& features_path, const std::string& data_dir,
                                  std::vector<FeatureVector>* features_out) {
  if (!features_path.empty()) {
    auto features = load_feature_cache(features_path);
    Dataset records;
    for (const FeatureVector& f : features) {
      BScanRecord r;
      r.case_id = f.case_id;
      r.scan_index = f.scan_index;
      r.image = Tensor::zeros({8, 8, 1});  // placeholder; only identity matters here
      records.push_back(std::move(r));
    }
    if (features_out) *features_out = std::move(features);
    return records;
  }
  if (data_dir.empty()) throw ConfigError("need --features or --data for the dataset index");
  return load_dataset(data_dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"annotation-efficient segmentation workbench"};
  app.require_subcommand(1);

  // ------------------------------------------------------------ gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic layered-phantom dataset");
  std::string gen_out, gen_format = "png";
  SynthSpec gen_spec;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--cases", gen_spec.cases, "number of cases");
  gen->add_option("--scans", gen_spec.scans_per_case, "scans per case");
  gen->add_option("--side", gen_spec.image_side, "image side in pixels");
  gen->add_option("--lesions-min", gen_spec.lesion_count_min, "minimum lesion count");
  gen->add_option("--lesions-max", gen_spec.lesion_count_max, "maximum lesion count");
  gen->add_option("--radius-min", gen_spec.lesion_radius_min, "minimum lesion radius");
  gen->add_option("--radius-max", gen_spec.lesion_radius_max, "maximum lesion radius");
  gen->add_option("--drift", gen_spec.drift, "within-case perturbation magnitude");
  gen->add_option("--noise", gen_spec.noise, "speckle amplitude");
  gen->add_option("--seed", gen_spec.seed, "generator seed");
  gen->add_option("--format", gen_format, "image format: png or pgm")
      ->check(CLI::IsMember({"png", "pgm"}));
  add_config_flag(gen);

  // ---------------------------------------------------- extract-features
  auto* extract = app.add_subcommand("extract-features",
                                     "embed every scan with the encoder and cache the vectors");
  std::string ex_data, ex_out, ex_weights, ex_preset = "desk", ex_pooling = "mean-pool";
  std::uint64_t ex_seed = 0;
  extract->add_option("--data", ex_data, "dataset directory")->required();
  extract->add_option("--out", ex_out, "feature cache path (.oefc)")->required();
  extract->add_option("--weights", ex_weights, "encoder weight container (.oewt)");
  extract->add_option("--preset", ex_preset, "encoder preset when no weights are given")
      ->check(CLI::IsMember({"desk", "vit-large"}));
  extract->add_option("--seed", ex_seed, "random-init seed when no weights are given");
  extract->add_option("--pooling", ex_pooling, "feature pooling: mean-pool or flatten")
      ->check(CLI::IsMember({"mean-pool", "flatten"}));
  add_config_flag(extract);

  // ---------------------------------------------------------------select
  auto* select = app.add_subcommand("select", "choose the annotation budget");
  std::string sel_strategy = "coreset", sel_budget, sel_features, sel_data, sel_out;
  std::uint64_t sel_seed = 0;
  select->add_option("--strategy", sel_strategy, "coreset, random, or uniform")
      ->check(CLI::IsMember({"coreset", "random", "uniform"}));
  select->add_option("--budget", sel_budget, "count or percentage, e.g. 12 or 10%")->required();
  select->add_option("--features", sel_features, "feature cache (required for coreset)");
  select->add_option("--data", sel_data, "dataset directory (index source for random/uniform)");
  select->add_option("--seed", sel_seed, "selection seed (random strategy)");
  select->add_option("--out", sel_out, "manifest path (.json)")->required();
  add_config_flag(select);

  // ------------------------------------------------------- pretrain-recon
  auto* pre = app.add_subcommand("pretrain-recon",
                                 "toy masked-reconstruction pretraining; reports the loss curve");
  std::string pre_data, pre_out, pre_history, pre_preset = "desk";
  PretrainConfig pre_cfg;
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_option("--out", pre_out, "output weight container (.oewt)")->required();
  pre->add_option("--history", pre_history, "optional loss-curve JSON path");
  pre->add_option("--preset", pre_preset, "encoder preset")
      ->check(CLI::IsMember({"desk", "vit-large"}));
  pre->add_option("--epochs", pre_cfg.epochs, "training epochs");
  pre->add_option("--batch", pre_cfg.batch_size, "batch size");
  pre->add_option("--lr", pre_cfg.learning_rate, "learning rate");
  pre->add_option("--mask-ratio", pre_cfg.mask_ratio, "masking ratio");
  pre->add_option("--seed", pre_cfg.seed, "training seed");
  add_config_flag(pre);

  // ----------------------------------------------------------------train
  auto* train = app.add_subcommand("train", "fine-tune on a selection manifest");
  std::string tr_data, tr_manifest, tr_out, tr_history, tr_encoder, tr_decoder,
      tr_preset = "desk", tr_freeze = "decoder-only";
  TrainConfig tr_cfg;
  train->add_option("--data", tr_data, "dataset directory")->required();
  train->add_option("--manifest", tr_manifest, "selection manifest (.json)")->required();
  train->add_option("--out", tr_out, "trained weight container (.oewt)")->required();
  train->add_option("--history", tr_history, "training history JSON path");
  train->add_option("--encoder", tr_encoder, "initial encoder weights (.oewt)");
  train->add_option("--decoder", tr_decoder, "initial decoder weights (.oewt)");
  train->add_option("--preset", tr_preset, "encoder preset when no weights are given")
      ->check(CLI::IsMember({"desk", "vit-large"}));
  train->add_option("--lr", tr_cfg.learning_rate, "initial learning rate");
  train->add_option("--batch", tr_cfg.batch_size, "batch size");
  train->add_option("--epochs", tr_cfg.max_epochs, "epoch cap");
  train->add_option("--val-fraction", tr_cfg.validation_fraction, "validation fraction");
  train->add_option("--freeze", tr_freeze, "decoder-only or all")
      ->check(CLI::IsMember({"decoder-only", "all"}));
  train->add_option("--seed", tr_cfg.seed, "training seed");
  add_config_flag(train);

  // -------------------------------------------------------------evaluate
  auto* eval = app.add_subcommand("evaluate", "DSC report for trained weights");
  std::string ev_data, ev_weights, ev_cases, ev_subset = "all", ev_report;
  double ev_threshold = 0.5, ev_train_fraction = 0.5;
  std::uint64_t ev_split_seed = 0;
  bool ev_per_case = false;
  eval->add_option("--data", ev_data, "dataset directory")->required();
  eval->add_option("--weights", ev_weights, "trained weight container (.oewt)")->required();
  eval->add_option("--threshold", ev_threshold, "binarization threshold");
  eval->add_option("--cases", ev_cases, "explicit comma-separated case list");
  eval->add_option("--subset", ev_subset, "all, train, or test (via the case split)")
      ->check(CLI::IsMember({"all", "train", "test"}));
  eval->add_option("--train-fraction", ev_train_fraction, "case split fraction");
  eval->add_option("--split-seed", ev_split_seed, "case split seed");
  eval->add_flag("--per-case", ev_per_case, "also print per-case means");
  eval->add_option("--report", ev_report, "optional JSON report path");
  add_config_flag(eval);

  // ----------------------------------------------------------------sweep
  auto* sweep = app.add_subcommand("sweep", "budget x strategy x seed experiment grid");
  std::string sw_out_dir, sw_data, sw_encoder, sw_budgets = "10%,25%,50%,100%",
              sw_strategies = "coreset,random,uniform";
  SweepConfig sw_cfg;
  sweep->add_option("--out-dir", sw_out_dir, "output directory")->required();
  sweep->add_option("--data", sw_data, "fixed dataset directory (default: per-seed phantoms)");
  sweep->add_option("--encoder", sw_encoder, "fixed encoder weights (.oewt)");
  sweep->add_option("--budgets", sw_budgets, "comma-separated budgets");
  sweep->add_option("--strategies", sw_strategies, "comma-separated strategies");
  sweep->add_option("--seeds", sw_cfg.seeds, "number of seeds");
  sweep->add_option("--base-seed", sw_cfg.base_seed, "first seed value");
  sweep->add_option("--train-fraction", sw_cfg.train_fraction, "case split fraction");
  sweep->add_option("--lr", sw_cfg.train.learning_rate, "fine-tune learning rate");
  sweep->add_option("--batch", sw_cfg.train.batch_size, "fine-tune batch size");
  sweep->add_option("--epochs", sw_cfg.train.max_epochs, "fine-tune epoch cap");
  sweep->add_option("--cases", sw_cfg.synth.cases, "phantom cases per seed");
  sweep->add_option("--scans", sw_cfg.synth.scans_per_case, "phantom scans per case");
  sweep->add_option("--side", sw_cfg.synth.image_side, "phantom image side");
  sweep->add_option("--drift", sw_cfg.synth.drift, "phantom within-case drift");
  sweep->add_option("--noise", sw_cfg.synth.noise, "phantom speckle amplitude");
  sweep->add_option("--threads", sw_cfg.threads, "worker count (0: OESEG_THREADS, then auto)");
  add_config_flag(sweep);

  // ---------------------------------------------------------------report
  auto* report = app.add_subcommand("report", "render a sweep CSV as a table");
  std::string rp_csv;
  report->add_option("--csv", rp_csv, "sweep results CSV")->required();
  add_config_flag(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  auto write_json_file = [](const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot create " + path);
    out << j.dump(2) << "\n";
    if (!out) throw DataError("write failure on " + path);
  };

  try {
    if (gen->parsed()) {
      Dataset data = generate(gen_spec);
      save_dataset(gen_out, data, gen_format);
      json cfg_dump = {{"command", "gen-data"},
                       {"cases", gen_spec.cases},
                       {"scans", gen_spec.scans_per_case},
                       {"side", gen_spec.image_side},
                       {"drift", gen_spec.drift},
                       {"noise", gen_spec.noise},
                       {"format", gen_format}};
      json meta = {{"version", 1},
                   {"cases", gen_spec.cases},
                   {"scans_per_case", gen_spec.scans_per_case},
                   {"image_side", gen_spec.image_side},
                   {"stamp", json::parse(make_stamp(cfg_dump.dump(), {gen_spec.seed}))}};
      write_json_file((fs::path(gen_out) / "dataset.json").string(), meta);
      std::cout << "wrote " << data.size() << " scans under " << gen_out << "\n";
    }

    if (extract->parsed()) {
      Dataset data = load_dataset(ex_data);
      index_dataset(data);  // canonical order
      EncoderWeights enc = load_or_init_encoder(ex_weights, ex_preset, ex_seed);
      auto features = extract_features(data, enc, enc.cfg, parse_pooling(ex_pooling));
      save_feature_cache(ex_out, features);
      json cfg_dump = {{"command", "extract-features"},
                       {"data", ex_data},
                       {"weights", ex_weights},
                       {"preset", ex_preset},
                       {"pooling", ex_pooling}};
      std::string stamp = make_stamp(cfg_dump.dump(), {ex_seed});
      json stamp_json = json::parse(stamp);
      stamp_json["encoder_fingerprint"] =
          ex_weights.empty() ? ("random-init:seed=" + std::to_string(ex_seed))
                             : file_fingerprint(ex_weights);
      write_stamp_sidecar(ex_out, stamp_json.dump());
      std::cout << "cached " << features.size() << " feature vectors (K="
                << features.front().values.size() << ") to " << ex_out << "\n";
    }

    if (select->parsed()) {
      std::vector<FeatureVector> features;
      Dataset records = dataset_from_cache_or_dir(sel_features, sel_data, &features);
      DatasetIndex index = index_dataset(records);
      if (!features.empty()) {
        std::sort(features.begin(), features.end(),
                  [](const FeatureVector& a, const FeatureVector& b) {
                    if (a.case_id != b.case_id) return a.case_id < b.case_id;
                    return a.scan_index < b.scan_index;
                  });
      }
      std::size_t s = resolve_budget(sel_budget, index.size());
      Strategy strategy = parse_strategy(sel_strategy);
      SelectionManifest manifest;
      switch (strategy) {
        case Strategy::kCoreset:
          if (features.empty()) {
            throw ConfigError("select: the coreset strategy needs --features");
          }
          manifest = select_coreset(index, features, s);
          break;
        case Strategy::kRandom:
          manifest = select_random(index, s, sel_seed);
          break;
        case Strategy::kUniform:
          manifest = select_uniform(index, s);
          break;
      }
      manifest.seed = sel_seed;
      if (!sel_features.empty()) {
        manifest.encoder_fingerprint = file_fingerprint(sel_features);
        manifest.pooling = features.front().pooling;
      }
      json cfg_dump = {{"command", "select"},
                       {"strategy", sel_strategy},
                       {"budget", sel_budget},
                       {"features", sel_features},
                       {"data", sel_data}};
      save_manifest(sel_out, manifest, make_stamp(cfg_dump.dump(), {sel_seed}));
      std::cout << "selected " << manifest.selected.size() << " of " << index.size()
                << " scans -> " << sel_out << "\n";
    }

    if (pre->parsed()) {
      Dataset data = load_dataset(pre_data);
      EncoderConfig enc_cfg = preset_by_name(pre_preset);
      MaeConfig mae_cfg = pre_preset == "desk" ? MaeConfig::desk() : MaeConfig::paper();
      PretrainResult result = pretrain_reconstruction(enc_cfg, mae_cfg, data, pre_cfg);
      for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
        std::cout << "epoch " << (e + 1) << " recon_loss " << result.epoch_losses[e] << "\n";
      }
      ModelBundle bundle;
      bundle.encoder = std::move(result.encoder);
      bundle.mae = std::move(result.decoder);
      save_models(pre_out, bundle);
      json cfg_dump = {{"command", "pretrain-recon"}, {"data", pre_data},
                       {"preset", pre_preset},        {"epochs", pre_cfg.epochs},
                       {"batch", pre_cfg.batch_size}, {"lr", pre_cfg.learning_rate},
                       {"mask_ratio", pre_cfg.mask_ratio}};
      std::string stamp = make_stamp(cfg_dump.dump(), {pre_cfg.seed});
      write_stamp_sidecar(pre_out, stamp);
      if (!pre_history.empty()) {
        json h = {{"version", 1},
                  {"epoch_losses", result.epoch_losses},
                  {"stamp", json::parse(stamp)}};
        write_json_file(pre_history, h);
      }
      std::cout << "saved pretrained weights to " << pre_out << "\n";
    }

    if (train->parsed()) {
      Dataset data = load_dataset(tr_data);
      SelectionManifest manifest = load_manifest(tr_manifest);
      tr_cfg.freeze_policy = parse_freeze_policy(tr_freeze);

      EncoderWeights enc = load_or_init_encoder(tr_encoder, tr_preset,
                                                mix_seed(tr_cfg.seed, 0xe1cULL));
      std::optional<SegDecoderWeights> dec;
      if (!tr_decoder.empty()) {
        ModelBundle bundle = load_models(tr_decoder);
        if (!bundle.seg) throw FormatError(tr_decoder + " holds no decoder weights");
        dec = std::move(*bundle.seg);
      } else if (!tr_encoder.empty()) {
        ModelBundle bundle = load_models(tr_encoder);
        if (bundle.seg) dec = std::move(*bundle.seg);
      }
      if (!dec) {
        dec = SegDecoderWeights::random_init(SegDecoderConfig::from_encoder(enc.cfg),
                                             mix_seed(tr_cfg.seed, 0xd2cULL));
      }

      FinetuneResult result = finetune(enc, *dec, manifest, data, tr_cfg);
      ModelBundle out;
      out.encoder = std::move(result.encoder);
      out.seg = std::move(result.decoder);
      save_models(tr_out, out);
      json cfg_dump = {{"command", "train"},       {"data", tr_data},
                       {"manifest", tr_manifest},  {"lr", tr_cfg.learning_rate},
                       {"batch", tr_cfg.batch_size}, {"epochs", tr_cfg.max_epochs},
                       {"freeze", tr_freeze},      {"val_fraction", tr_cfg.validation_fraction}};
      std::string stamp = make_stamp(cfg_dump.dump(), {tr_cfg.seed});
      write_stamp_sidecar(tr_out, stamp);
      if (!tr_history.empty()) save_history(tr_history, result.history, stamp);
      const auto& last = result.history.epochs.back();
      std::cout << "trained " << result.history.epochs.size() << " epochs (stop: "
                << result.history.stop_reason << ", best epoch " << result.history.best_epoch
                << ", best val loss "
                << result.history.epochs[static_cast<std::size_t>(result.history.best_epoch - 1)]
                       .val_loss
                << ", final train loss " << last.train_loss << ") -> " << tr_out << "\n";
    }

    if (eval->parsed()) {
      Dataset data = load_dataset(ev_data);
      DatasetIndex index = index_dataset(data);
      Dataset subset;
      if (!ev_cases.empty()) {
        subset = filter_cases(data, split_list(ev_cases));
      } else if (ev_subset != "all") {
        CaseSplit split = split_cases(index, ev_train_fraction, ev_split_seed);
        subset = filter_cases(data,
                              ev_subset == "train" ? split.train_cases : split.test_cases);
      } else {
        subset = data;
      }
      ModelBundle bundle = load_models(ev_weights);
      if (!bundle.encoder || !bundle.seg) {
        throw FormatError(ev_weights + " must hold encoder and decoder weights");
      }
      EvalResult r = evaluate(*bundle.encoder, *bundle.seg, subset, ev_threshold);
      std::cout << "DSC mean (std) over " << r.per_scan.size() << " scans: " << r.mean << " ("
                << r.stddev << ")\n";
      if (ev_per_case) {
        for (const auto& [case_id, mean] : r.per_case) {
          std::cout << "  " << case_id << ": " << mean << "\n";
        }
      }
      if (!ev_report.empty()) {
        json cfg_dump = {{"command", "evaluate"},
                         {"data", ev_data},
                         {"weights", ev_weights},
                         {"threshold", ev_threshold},
                         {"subset", ev_subset},
                         {"cases", ev_cases}};
        json rep = {{"version", 1},
                    {"mean_dsc", r.mean},
                    {"std_dsc", r.stddev},
                    {"scans", r.per_scan.size()},
                    {"per_scan", r.per_scan},
                    {"stamp", json::parse(make_stamp(cfg_dump.dump(), {ev_split_seed}))}};
        json per_case = json::object();
        for (const auto& [case_id, mean] : r.per_case) per_case[case_id] = mean;
        rep["per_case"] = per_case;
        write_json_file(ev_report, rep);
      }
    }

    if (sweep->parsed()) {
      sw_cfg.budgets = split_list(sw_budgets);
      sw_cfg.strategies.clear();
      for (const std::string& s : split_list(sw_strategies)) {
        sw_cfg.strategies.push_back(parse_strategy(s));
      }
      std::optional<Dataset> fixed_data;
      if (!sw_data.empty()) fixed_data = load_dataset(sw_data);
      std::optional<EncoderWeights> fixed_encoder;
      if (!sw_encoder.empty()) {
        ModelBundle bundle = load_models(sw_encoder);
        if (!bundle.encoder) throw FormatError(sw_encoder + " holds no encoder weights");
        fixed_encoder = std::move(*bundle.encoder);
        sw_cfg.encoder = fixed_encoder->cfg;
      }
      fs::create_directories(sw_out_dir);
      auto rows = run_sweep(sw_cfg, fixed_data ? &*fixed_data : nullptr,
                            fixed_encoder ? &*fixed_encoder : nullptr, &std::cerr);
      std::string csv_path = (fs::path(sw_out_dir) / "sweep.csv").string();
      std::string svg_path = (fs::path(sw_out_dir) / "sweep.svg").string();
      save_sweep_csv(csv_path, rows);
      save_sweep_svg(svg_path, rows);
      json cfg_dump = {{"command", "sweep"},
                       {"budgets", sw_budgets},
                       {"strategies", sw_strategies},
                       {"seeds", sw_cfg.seeds},
                       {"train_fraction", sw_cfg.train_fraction},
                       {"lr", sw_cfg.train.learning_rate},
                       {"epochs", sw_cfg.train.max_epochs},
                       {"data", sw_data}};
      std::vector<std::uint64_t> seeds;
      for (int i = 0; i < sw_cfg.seeds; ++i) {
        seeds.push_back(sw_cfg.base_seed + static_cast<std::uint64_t>(i));
      }
      write_stamp_sidecar(csv_path, make_stamp(cfg_dump.dump(), seeds));
      std::cout << render_sweep_table(rows);
      std::cout << "wrote " << csv_path << " and " << svg_path << "\n";
    }

    if (report->parsed()) {
      std::cout << render_sweep_table(load_sweep_csv(rp_csv));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }

  return 0;
}

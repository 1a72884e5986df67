// sidial: command-line front end for data generation, corruption, training,
// evaluation and the experiment table.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "sidial/datagen.hpp"
#include "sidial/missingness.hpp"
#include "sidial/pipeline.hpp"

namespace fs = std::filesystem;
using namespace sidial;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string arm;
  std::string kind;
  double sigma = 0.0;
  bool verbose = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_arm) {
  cmd->add_option("--config", c.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "run a single seed instead of the config's list");
  cmd->add_option("--out", c.out, "output directory (overrides the config)");
  cmd->add_option("--kind", c.kind, "corruption kind (overrides the config's list)");
  cmd->add_option("--sigma", c.sigma, "blur strength for --kind");
  if (with_arm) cmd->add_option("--arm", c.arm, "baseline | random_qa | si_dial (overrides the config)");
  cmd->add_flag("-v,--verbose", c.verbose, "log training progress to stderr");
}

pipeline::ExperimentConfig resolve(const Common& c) {
  pipeline::ExperimentConfig cfg = c.config.empty() ? pipeline::ExperimentConfig{} : pipeline::load_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.out = c.out;
  if (!c.arm.empty()) cfg.arms = {pipeline::arm_from_string(c.arm)};
  if (!c.kind.empty()) cfg.corruptions = {{missingness::corruption_kind_from_string(c.kind), c.sigma}};
  cfg.validate();
  return cfg;
}

pipeline::ProgressFn progress_for(const Common& c) {
  if (!c.verbose) return {};
  return [](const std::string& line) { std::cerr << line << '\n'; };
}

int fail(const std::string& kind, const std::string& message, int code) {
  std::cerr << io::json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale scene graph generation with missing vision and dialog"};
  app.require_subcommand(1);

  Common gen_opts, det_opts, train_opts, eval_opts, report_opts;

  auto* generate = app.add_subcommand("generate", "write scenes.jsonl, eval-scenes.jsonl, vocab.json and gen-manifest.json");
  add_common(generate, gen_opts, false);

  std::string corrupt_in, corrupt_out, corrupt_kind = "semantic_mask";
  double corrupt_sigma = 0.0;
  auto* corrupt = app.add_subcommand("corrupt", "apply a corruption to a scene file");
  corrupt->add_option("--in", corrupt_in, "scene JSONL")->required()->check(CLI::ExistingFile);
  corrupt->add_option("--kind", corrupt_kind, "none | object_blur | image_blur | semantic_mask");
  corrupt->add_option("--sigma", corrupt_sigma, "blur strength in grid cells");
  corrupt->add_option("--out", corrupt_out, "corrupted scene JSONL")->required();

  std::string det_data, det_out;
  auto* train_det = app.add_subcommand("train-detector", "stage 1: fit the detector on corrupted training data");
  add_common(train_det, det_opts, false);
  train_det->add_option("--data", det_data, "corrupted scene JSONL; with it, --out names the detector file")
      ->check(CLI::ExistingFile);
  auto* train = app.add_subcommand("train", "stage 2: train the configured arms with the detector frozen");
  add_common(train, train_opts, true);
  auto* evaluate = app.add_subcommand("evaluate", "score saved runs; writes report.json and transcripts.jsonl");
  add_common(evaluate, eval_opts, true);
  auto* report = app.add_subcommand("report", "run the corruption x arm x seed matrix and write table.md");
  add_common(report, report_opts, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what(), 2);
  }

  try {
    if (*generate) {
      const auto cfg = resolve(gen_opts);
      const std::uint64_t seed = cfg.seeds.front();
      const fs::path dir(cfg.out);
      fs::create_directories(dir);
      const auto train = pipeline::make_split(cfg, seed, false);
      const auto eval = pipeline::make_split(cfg, seed, true);
      datagen::save_scenes((dir / "scenes.jsonl").string(), train);
      datagen::save_scenes((dir / "eval-scenes.jsonl").string(), eval);
      io::write_text_file((dir / "vocab.json").string(), io::to_json(datagen::make_vocabulary(cfg.gen)).dump(2) + "\n");
      io::json scene_seeds = io::json::array(), eval_seeds = io::json::array();
      for (const auto& sc : train) scene_seeds.push_back(sc.scene_id);
      for (const auto& sc : eval) eval_seeds.push_back(sc.scene_id);
      const io::json manifest{{"gen", datagen::to_json(cfg.gen)},
                              {"run_seed", seed},
                              {"eval_scenes", cfg.eval_scenes},
                              {"scenes", scene_seeds},
                              {"eval", eval_seeds}};
      io::write_text_file((dir / "gen-manifest.json").string(), manifest.dump(2) + "\n");
      std::cout << io::json{{"scenes", (dir / "scenes.jsonl").string()},
                            {"eval", (dir / "eval-scenes.jsonl").string()},
                            {"count", train.size()}}
                       .dump()
                << '\n';
    } else if (*corrupt) {
      const missingness::CorruptionSpec spec{missingness::corruption_kind_from_string(corrupt_kind), corrupt_sigma};
      spec.validate();
      std::vector<io::json> records;
      io::for_each_jsonl(corrupt_in, [&](std::size_t, const io::json& j) {
        records.push_back(missingness::to_json(missingness::apply(io::scene_from_json(j), spec)));
      });
      io::write_jsonl(corrupt_out, records);
      std::cout << io::json{{"out", corrupt_out}, {"scenes", records.size()}}.dump() << '\n';
    } else if (*train_det) {
      const auto cfg = resolve(det_opts);
      if (!det_data.empty()) {
        if (det_opts.out.empty()) return fail("usage", "--data requires --out <detector.json>", 2);
        const auto data = missingness::load_corrupted(det_data);
        const auto det = perception::train_detector(data, datagen::make_vocabulary(cfg.gen).num_objects(), cfg.detector);
        pipeline::write_detector(det_opts.out, det);
        std::cout << io::json{{"detector", det_opts.out}, {"train_label_accuracy", perception::label_accuracy(data, det)}}
                         .dump()
                  << '\n';
        return 0;
      }
      io::json written = io::json::array();
      for (const auto& spec : cfg.corruptions)
        for (std::uint64_t seed : cfg.seeds) {
          const auto data = pipeline::prepare_data(cfg, spec, seed);
          const auto det = pipeline::train_detector(cfg, data);
          const auto path = pipeline::run_paths(cfg, spec, seed).detector();
          pipeline::write_detector(path, det);
          written.push_back({{"detector", path.string()},
                             {"train_label_accuracy", perception::label_accuracy(data.train, det)}});
        }
      std::cout << written.dump(2) << '\n';
    } else if (*train) {
      const auto cfg = resolve(train_opts);
      io::json records = io::json::array();
      for (const auto& spec : cfg.corruptions)
        for (auto arm : cfg.arms) records.push_back(pipeline::to_json(pipeline::train(cfg, arm, spec, progress_for(train_opts))));
      std::cout << records.dump(2) << '\n';
    } else if (*evaluate) {
      const auto cfg = resolve(eval_opts);
      io::json out = io::json::array();
      for (const auto& spec : cfg.corruptions)
        for (std::uint64_t seed : cfg.seeds) {
          const auto data = pipeline::prepare_data(cfg, spec, seed);
          for (auto arm : cfg.arms) {
            const auto r = pipeline::evaluate_seed(cfg, arm, spec, seed, data);
            out.push_back({{"corruption", spec.label()},
                           {"arm", pipeline::to_string(arm)},
                           {"seed", seed},
                           {"report", pipeline::run_paths(cfg, spec, seed).report(arm).string()},
                           {"sgcls_mR@20", r.at(metrics::Protocol::kSgCls, 20)}});
          }
        }
      std::cout << out.dump(2) << '\n';
    } else if (*report) {
      const auto cfg = resolve(report_opts);
      const auto table = pipeline::run_experiment(cfg, progress_for(report_opts));
      std::cout << pipeline::render_markdown(table);
      for (const auto& c : table.cells)
        if (!c.failures.empty()) return fail("partial", "some cells failed; see table.md", 3);
    }
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}

// moekit: MoE scaling-law toolkit and toy inference engine.
//
// Subcommands: params, flops, memory, fit, predict, optimize, sweep,
// init-model, train-toy, generate, quantize, bench, utilization.
// Every subcommand writes to --output (default: stdout). Exit codes:
// 0 success, 1 domain/usage error, 2 I/O error.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moekit/arch.hpp"
#include "moekit/bench.hpp"
#include "moekit/container.hpp"
#include "moekit/fit.hpp"
#include "moekit/kernel.hpp"
#include "moekit/model.hpp"
#include "moekit/quant.hpp"
#include "moekit/scaling.hpp"
#include "moekit/text.hpp"

using namespace moekit;
using nlohmann::json;

namespace {

void emit(const std::string& output_path, const std::string& text) {
  if (output_path.empty()) {
    std::cout << text;
    if (!text.empty() && text.back() != '\n') std::cout << '\n';
    return;
  }
  std::ofstream out(output_path);
  if (!out) throw IoError("cannot open output file: " + output_path);
  out << text;
  if (!out) throw IoError("write failed: " + output_path);
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw DomainError("invalid JSON in " + path + ": " + e.what());
  }
  return j;
}

ModelConfig load_config(const std::string& path) {
  const ModelConfig cfg = model_config_from_json(read_json_file(path));
  cfg.validate();
  return cfg;
}

CoeffsFile load_coeffs(const std::string& path) {
  return coeffs_file_from_json(read_json_file(path));
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::vector<int64_t> parse_int_list(const std::string& csv) {
  std::vector<int64_t> out;
  for (double v : parse_double_list(csv)) out.push_back(static_cast<int64_t>(v));
  return out;
}

std::vector<std::string> split_paths(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string domain_tag(const std::string& path) {
  std::string stem = path;
  const size_t slash = stem.find_last_of("/\\");
  if (slash != std::string::npos) stem = stem.substr(slash + 1);
  const size_t dot = stem.find_last_of('.');
  if (dot != std::string::npos) stem = stem.substr(0, dot);
  return stem;
}

// Chunk a long token stream into fixed-length sequences.
std::vector<std::vector<int32_t>> chunk_tokens(const std::vector<int32_t>& ids,
                                               int64_t seq_len) {
  std::vector<std::vector<int32_t>> out;
  for (size_t i = 0; i + 2 <= ids.size(); i += seq_len) {
    const size_t end = std::min(ids.size(), i + seq_len);
    if (end - i >= 2) out.emplace_back(ids.begin() + i, ids.begin() + end);
  }
  return out;
}

std::string frontier_csv(const std::vector<FrontierPoint>& rows,
                         const std::vector<uint8_t>& truncated) {
  std::ostringstream out;
  out << "setting,flops,n_act_b,d_b,loss,truncated\n";
  out.precision(10);
  for (size_t i = 0; i < rows.size(); ++i) {
    out << rows[i].setting << ',' << rows[i].flops << ',' << rows[i].n_act_b
        << ',' << rows[i].d_b << ',' << rows[i].loss << ','
        << (i < truncated.size() ? int(truncated[i]) : 0) << '\n';
  }
  return out.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoE scaling-law toolkit and toy inference engine"};
  app.require_subcommand(1);
  uint64_t seed = 0;
  app.add_option("--seed", seed, "global RNG seed (default 0)");

  // --- params ---
  auto* cmd_params = app.add_subcommand("params", "exact parameter counts");
  std::string params_config, params_output;
  cmd_params->add_option("--config", params_config, "architecture JSON")->required();
  cmd_params->add_option("--output", params_output, "output file");

  // --- flops ---
  auto* cmd_flops = app.add_subcommand("flops", "inference/training FLOPs");
  std::string flops_config, flops_output;
  double flops_tokens = -1.0;
  cmd_flops->add_option("--config", flops_config, "architecture JSON")->required();
  cmd_flops->add_option("--tokens", flops_tokens, "training tokens (absolute)");
  cmd_flops->add_option("--output", flops_output, "output file");

  // --- memory ---
  auto* cmd_memory = app.add_subcommand("memory", "weight + KV memory proxy");
  std::string mem_config, mem_output;
  int mem_bw = 4, mem_bkv = 8;
  int64_t mem_context = 8192;
  double mem_budget = 5.0;
  cmd_memory->add_option("--config", mem_config, "architecture JSON")->required();
  cmd_memory->add_option("--bw", mem_bw, "weight bits {4,8,16}");
  cmd_memory->add_option("--bkv", mem_bkv, "KV cache bits {8,16}");
  cmd_memory->add_option("--context", mem_context, "context length T");
  cmd_memory->add_option("--budget-gb", mem_budget, "device budget in GB");
  cmd_memory->add_option("--output", mem_output, "output file");

  // --- fit ---
  auto* cmd_fit = app.add_subcommand("fit", "fit scaling-law coefficients");
  std::string fit_obs, fit_mode = "joint", fit_output, fit_setting;
  double fit_anchor_c = -1.0, fit_e_start = 1.0, fit_e_max = 32.0;
  cmd_fit->add_option("--observations", fit_obs, "CSV n_act_b,d_b,e,loss")->required();
  cmd_fit->add_option("--mode", fit_mode, "joint | per-setting");
  cmd_fit->add_option("--anchor-c", fit_anchor_c, "regularize c toward this value");
  cmd_fit->add_option("--e-start", fit_e_start, "transform anchor");
  cmd_fit->add_option("--e-max", fit_e_max, "transform saturation");
  cmd_fit->add_option("--setting", fit_setting, "metadata tag");
  cmd_fit->add_option("--output", fit_output, "output file");

  // --- predict ---
  auto* cmd_predict = app.add_subcommand("predict", "evaluate the loss surface");
  std::string pred_coeffs, pred_grid, pred_output;
  double pred_n = 0.0, pred_d = 0.0, pred_e = 1.0;
  cmd_predict->add_option("--coeffs", pred_coeffs, "coefficients JSON")->required();
  cmd_predict->add_option("--n-act", pred_n, "active params, billions");
  cmd_predict->add_option("--d", pred_d, "tokens, billions");
  cmd_predict->add_option("--e", pred_e, "expert count");
  cmd_predict->add_option("--grid", pred_grid, "CSV of points to evaluate");
  cmd_predict->add_option("--output", pred_output, "output file");

  // --- optimize ---
  auto* cmd_opt = app.add_subcommand("optimize", "memory-constrained argmin");
  std::string opt_coeffs, opt_output, opt_frontier;
  double opt_flops = 0.0, opt_memory = 5.0;
  int64_t opt_context = 8192;
  int opt_bw = 4, opt_bkv = 8, opt_points = 64;
  double opt_nact_min = 0.05, opt_nact_max = 2.0;
  cmd_opt->add_option("--coeffs", opt_coeffs, "coefficients JSON")->required();
  cmd_opt->add_option("--flops", opt_flops, "training FLOPs budget")->required();
  cmd_opt->add_option("--memory-gb", opt_memory, "device memory budget GB");
  cmd_opt->add_option("--context", opt_context, "context length for KV term");
  cmd_opt->add_option("--bw", opt_bw, "weight bits");
  cmd_opt->add_option("--bkv", opt_bkv, "KV bits");
  cmd_opt->add_option("--grid-points", opt_points, "n_act grid resolution");
  cmd_opt->add_option("--n-act-min", opt_nact_min, "grid lower bound, billions");
  cmd_opt->add_option("--n-act-max", opt_nact_max, "grid upper bound, billions");
  cmd_opt->add_option("--frontier", opt_frontier, "write full frontier CSV here");
  cmd_opt->add_option("--output", opt_output, "output file");

  // --- sweep ---
  auto* cmd_sweep = app.add_subcommand("sweep", "compute-optimal frontier CSV");
  std::string sweep_axis, sweep_flops_csv, sweep_dir = "fixtures/coeffs",
              sweep_output;
  cmd_sweep->add_option("--axis", sweep_axis, "experts | granularity | shared")
      ->required();
  cmd_sweep->add_option("--flops", sweep_flops_csv, "comma-separated budgets")
      ->required();
  cmd_sweep->add_option("--coeffs-dir", sweep_dir, "fixture directory");
  cmd_sweep->add_option("--output", sweep_output, "output file");

  // --- init-model ---
  auto* cmd_init = app.add_subcommand("init-model", "random toy model container");
  std::string init_config, init_out, init_output;
  cmd_init->add_option("--config", init_config, "architecture JSON")->required();
  cmd_init->add_option("--out", init_out, "container path")->required();
  cmd_init->add_option("--output", init_output, "summary file");

  // --- train-toy ---
  auto* cmd_train = app.add_subcommand("train-toy", "toy training loop");
  std::string train_model, train_out, train_prompts, train_output;
  int train_steps = 200;
  int64_t train_seq = 64;
  double train_lr = 3e-3;
  bool train_qat = false;
  cmd_train->add_option("--model", train_model, "input container")->required();
  cmd_train->add_option("--out", train_out, "trained container")->required();
  cmd_train->add_option("--steps", train_steps, "optimizer steps");
  cmd_train->add_option("--seq-len", train_seq, "sequence length");
  cmd_train->add_option("--lr", train_lr, "learning rate");
  cmd_train->add_option("--prompts", train_prompts, "text file to memorize");
  cmd_train->add_flag("--qat", train_qat, "fake-quant INT4 forward");
  cmd_train->add_option("--output", train_output, "loss log CSV");

  // --- generate ---
  auto* cmd_gen = app.add_subcommand("generate", "greedy toy generation");
  std::string gen_model, gen_prompt, gen_prompt_file, gen_output;
  int64_t gen_max = 32;
  bool gen_naive = false;
  cmd_gen->add_option("--model", gen_model, "container path")->required();
  cmd_gen->add_option("--prompt", gen_prompt, "inline prompt text");
  cmd_gen->add_option("--prompt-file", gen_prompt_file, "prompt file");
  cmd_gen->add_option("--max-tokens", gen_max, "tokens to generate");
  cmd_gen->add_flag("--naive", gen_naive, "use the naive MoE path");
  cmd_gen->add_option("--output", gen_output, "output file");

  // --- quantize ---
  auto* cmd_quant = app.add_subcommand("quantize", "INT4 group-32 weights");
  std::string quant_model, quant_out, quant_output;
  cmd_quant->add_option("--model", quant_model, "input container")->required();
  cmd_quant->add_option("--out", quant_out, "quantized container")->required();
  cmd_quant->add_option("--output", quant_output, "report file");

  // --- bench ---
  auto* cmd_bench = app.add_subcommand("bench", "prefill/decode microbenchmark");
  std::string bench_model, bench_prompts, bench_output, bench_csv;
  std::string bench_inputs = "32", bench_outputs = "16";
  int bench_repeats = 3;
  bool bench_naive = false;
  cmd_bench->add_option("--model", bench_model, "container path")->required();
  cmd_bench->add_option("--prompts", bench_prompts, "comma-separated prompt files")
      ->required();
  cmd_bench->add_option("--input-lens", bench_inputs, "comma-separated prefill lengths");
  cmd_bench->add_option("--output-lens", bench_outputs, "comma-separated decode lengths");
  cmd_bench->add_option("--repeats", bench_repeats, "timed runs per setting");
  cmd_bench->add_flag("--naive", bench_naive, "time the naive MoE path instead");
  cmd_bench->add_option("--csv", bench_csv, "also write flattened CSV here");
  cmd_bench->add_option("--output", bench_output, "report JSON file");

  // --- utilization ---
  auto* cmd_util = app.add_subcommand("utilization", "per-layer expert usage CSV");
  std::string util_model, util_prompts, util_output;
  int64_t util_seq = 64;
  cmd_util->add_option("--model", util_model, "container path")->required();
  cmd_util->add_option("--prompts", util_prompts, "comma-separated prompt files")
      ->required();
  cmd_util->add_option("--seq-len", util_seq, "chunk length");
  cmd_util->add_option("--output", util_output, "output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }

  try {
    if (*cmd_params) {
      const ModelConfig cfg = load_config(params_config);
      const ParamCounts counts = count_params(cfg.backbone, cfg.moe);
      emit(params_output, to_json(counts).dump(2));
    } else if (*cmd_flops) {
      const ModelConfig cfg = load_config(flops_config);
      const ParamCounts counts = count_params(cfg.backbone, cfg.moe);
      json j = {{"n_act", counts.n_act},
                {"inference_flops_per_token", inference_flops(counts)}};
      if (flops_tokens >= 0.0) {
        j["training_tokens"] = flops_tokens;
        j["training_flops"] = training_flops(counts, flops_tokens);
      }
      emit(flops_output, j.dump(2));
    } else if (*cmd_memory) {
      const ModelConfig cfg = load_config(mem_config);
      const ParamCounts counts = count_params(cfg.backbone, cfg.moe);
      const MemoryBudget budget{mem_bw, mem_bkv, mem_context, mem_budget};
      const MemoryReport rep = memory_proxy(counts, cfg.backbone, budget);
      const PackedFootprint packed = packed_footprint(counts.n_total);
      json j = {{"weight_gb", rep.weight_gb},
                {"kv_cache_gb", rep.kv_cache_gb},
                {"total_gb", rep.total_gb},
                {"feasible", rep.feasible},
                {"budget_gb", budget.budget_gb},
                {"packed_int4_f32_scales_gb", packed.total_f32_gb},
                {"packed_int4_f16_scales_gb", packed.total_f16_gb}};
      emit(mem_output, j.dump(2));
    } else if (*cmd_fit) {
      std::ifstream in(fit_obs);
      if (!in) throw IoError("cannot open: " + fit_obs);
      const auto obs = observations_from_csv(in);
      FitOptions opts;
      if (fit_mode == "joint") {
        opts.mode = FitMode::kJoint;
      } else if (fit_mode == "per-setting") {
        opts.mode = FitMode::kPerSetting;
      } else {
        throw DomainError("unknown fit mode: " + fit_mode);
      }
      opts.transform.e_start = fit_e_start;
      opts.transform.e_max = fit_e_max;
      if (fit_anchor_c > 0.0) opts.c_anchor = fit_anchor_c;
      const FitResult res = fit(obs, opts);
      CoeffsFile out;
      out.coeffs = res.coeffs;
      out.transform = opts.transform;
      out.setting = fit_setting;
      out.rmse = res.rmse;
      json j = to_json(out);
      j["metadata"]["iterations"] = res.iterations;
      j["metadata"]["stage"] =
          res.stage == FitStage::kRefined ? "refined" : "warm-start";
      j["metadata"]["converged"] = res.converged;
      emit(fit_output, j.dump(2));
    } else if (*cmd_predict) {
      const CoeffsFile cf = load_coeffs(pred_coeffs);
      if (!pred_grid.empty()) {
        std::ifstream in(pred_grid);
        if (!in) throw IoError("cannot open: " + pred_grid);
        const auto points = observations_from_csv(in);
        std::ostringstream out;
        out << "n_act_b,d_b,e,loss\n";
        out.precision(10);
        for (const Observation& o : points) {
          out << o.n_act_b << ',' << o.d_b << ',' << o.e << ','
              << predict_loss(cf.coeffs, o.n_act_b, o.d_b, cf.transform(o.e))
              << '\n';
        }
        emit(pred_output, out.str());
      } else {
        if (pred_n <= 0.0 || pred_d <= 0.0) {
          throw DomainError("predict needs --n-act and --d (or --grid)");
        }
        const double loss =
            predict_loss(cf.coeffs, pred_n, pred_d, cf.transform(pred_e));
        emit(pred_output, json{{"n_act_b", pred_n},
                               {"d_b", pred_d},
                               {"e", pred_e},
                               {"e_hat", cf.transform(pred_e)},
                               {"loss", loss}}
                              .dump(2));
      }
    } else if (*cmd_opt) {
      const CoeffsFile cf = load_coeffs(opt_coeffs);
      MemoryBudget budget{opt_bw, opt_bkv, opt_context, opt_memory};
      BackboneGrid grid;
      grid.points = opt_points;
      grid.n_act_min_b = opt_nact_min;
      grid.n_act_max_b = opt_nact_max;
      const OptimizeResult res =
          optimize_architecture(cf.coeffs, cf.transform, opt_flops, budget, grid);
      json j = {{"best_e", res.best.e},
                {"backbone",
                 {{"d_model", res.best.backbone.d_model},
                  {"d_ff", res.best.backbone.d_ff},
                  {"n_h", res.best.backbone.n_h},
                  {"n_kv", res.best.backbone.n_kv},
                  {"d_h", res.best.backbone.d_h},
                  {"n_l", res.best.backbone.n_l}}},
                {"n_act_b", res.best.counts.n_act_b()},
                {"n_total_b", res.best.counts.n_total_b()},
                {"d_b", res.best.d_b},
                {"memory_gb", res.best.memory_gb},
                {"loss", res.best.loss},
                {"candidates", res.frontier.size()}};
      emit(opt_output, j.dump(2));
      if (!opt_frontier.empty()) {
        std::ostringstream out;
        out << "e,d_model,n_l,n_act_b,n_total_b,d_b,memory_gb,loss,feasible\n";
        out.precision(10);
        for (const Candidate& c : res.frontier) {
          out << c.e << ',' << c.backbone.d_model << ',' << c.backbone.n_l
              << ',' << c.counts.n_act_b() << ',' << c.counts.n_total_b() << ','
              << c.d_b << ',' << c.memory_gb << ',' << c.loss << ','
              << (c.feasible ? 1 : 0) << '\n';
        }
        emit(opt_frontier, out.str());
      }
    } else if (*cmd_sweep) {
      const auto flops_list = parse_double_list(sweep_flops_csv);
      struct Setting {
        std::string tag;
        std::string file;
        double e = 1.0;  // transform argument (experts axis only)
        bool reduce = false;
      };
      std::vector<Setting> settings;
      if (sweep_axis == "experts") {
        for (double e : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0}) {
          settings.push_back({"e" + std::to_string((int)e),
                              sweep_dir + "/e_sweep_joint.json", e, true});
        }
      } else if (sweep_axis == "granularity") {
        for (int g : {1, 2, 4, 8, 16}) {
          settings.push_back({"g" + std::to_string(g),
                              sweep_dir + "/g" + std::to_string(g) + ".json",
                              1.0, false});
        }
      } else if (sweep_axis == "shared") {
        settings.push_back({"noshared", sweep_dir + "/noshared.json", 1.0, false});
        settings.push_back({"shared", sweep_dir + "/shared.json", 1.0, false});
      } else {
        throw DomainError("unknown sweep axis: " + sweep_axis);
      }

      std::vector<FrontierPoint> rows;
      for (double f : flops_list) {
        for (const Setting& s : settings) {
          const CoeffsFile cf = load_coeffs(s.file);
          const ScalingCoeffs coeffs =
              s.reduce ? reduce_chinchilla(cf.coeffs, cf.transform(s.e))
                       : cf.coeffs;
          rows.push_back(compute_optimal_split(coeffs, 1.0, f, s.tag));
        }
      }
      // truncation marker: the next-larger setting already wins at this budget
      std::vector<uint8_t> truncated(rows.size(), 0);
      const size_t ns = settings.size();
      for (size_t i = 0; i < rows.size(); ++i) {
        const size_t pos_in_group = i % ns;
        if (pos_in_group + 1 < ns && rows[i + 1].loss < rows[i].loss) {
          truncated[i] = 1;
        }
      }
      emit(sweep_output, frontier_csv(rows, truncated));
    } else if (*cmd_init) {
      const ModelConfig cfg = load_config(init_config);
      if (cfg.backbone.n_l > 8 || cfg.backbone.d_model > 512) {
        throw DomainError("init-model is toy scale; shrink the config");
      }
      Rng rng(seed);
      ModelWeights model;
      model.init(cfg, rng);
      save_model(model, init_out);
      emit(init_output, json{{"written", init_out},
                             {"n_total", count_params(cfg.backbone, cfg.moe).n_total}}
                            .dump(2));
    } else if (*cmd_train) {
      ModelWeights model = load_model(train_model);
      const int64_t vocab = model.config.backbone.vocab_size;
      std::vector<std::vector<int32_t>> batch;
      if (!train_prompts.empty()) {
        batch = chunk_tokens(load_prompt_tokens(train_prompts, vocab), train_seq);
        if (batch.empty()) throw DomainError("prompt file yielded no sequences");
      } else {
        Rng rng(seed);
        std::vector<int32_t> seq(train_seq);
        for (auto& t : seq) t = static_cast<int32_t>(rng.uniform_index(vocab));
        batch.push_back(seq);
      }
      TrainConfig tc;
      tc.lr = train_lr;
      tc.qat = train_qat;
      ModelGrads grads;
      grads.init(model);
      AdamState adam;
      std::ostringstream log;
      log << "step,loss,cross_entropy,z_loss\n";
      log.precision(10);
      for (int step = 0; step < train_steps; ++step) {
        const StepResult r = train_step(model, batch, tc, grads, adam);
        log << step << ',' << r.loss << ',' << r.cross_entropy << ','
            << r.z_loss << '\n';
      }
      save_model(model, train_out);
      emit(train_output, log.str());
    } else if (*cmd_gen) {
      const InferenceEngine eng = load_engine(gen_model);
      std::vector<int32_t> prompt;
      const int64_t vocab = eng.model.config.backbone.vocab_size;
      if (!gen_prompt_file.empty()) {
        prompt = load_prompt_tokens(gen_prompt_file, vocab);
      } else if (!gen_prompt.empty()) {
        prompt = tokenize(gen_prompt, vocab);
      } else {
        throw DomainError("generate needs --prompt or --prompt-file");
      }
      const auto ids = engine_generate(eng, prompt, gen_max, !gen_naive);
      std::ostringstream out;
      for (size_t i = 0; i < ids.size(); ++i) {
        out << ids[i] << (i + 1 < ids.size() ? ' ' : '\n');
      }
      emit(gen_output, out.str());
    } else if (*cmd_quant) {
      quantize_container(quant_model, quant_out);
      const auto entries = read_container(quant_out);
      int64_t q4_params = 0, f32_params = 0;
      for (const auto& e : entries) {
        int64_t numel = 1;
        for (int64_t s : e.shape) numel *= s;
        if (e.dtype == "q4g32") q4_params += numel;
        else if (e.name != "hparams") f32_params += numel;
      }
      const PackedFootprint packed = packed_footprint(q4_params);
      emit(quant_output, json{{"written", quant_out},
                              {"int4_params", q4_params},
                              {"float_params", f32_params},
                              {"packed_int4_f32_scales_gb", packed.total_f32_gb},
                              {"packed_int4_f16_scales_gb", packed.total_f16_gb}}
                             .dump(2));
    } else if (*cmd_bench) {
      const InferenceEngine eng = load_engine(bench_model);
      const int64_t vocab = eng.model.config.backbone.vocab_size;
      std::vector<std::pair<std::string, std::vector<int32_t>>> domains;
      for (const std::string& path : split_paths(bench_prompts)) {
        domains.push_back({domain_tag(path), load_prompt_tokens(path, vocab)});
      }
      BenchOptions opts;
      opts.input_lens = parse_int_list(bench_inputs);
      opts.output_lens = parse_int_list(bench_outputs);
      opts.repeats = bench_repeats;
      opts.use_fused = !bench_naive;
      const auto reports = run_bench(eng, domains, opts);
      emit(bench_output, to_json(reports).dump(2));
      if (!bench_csv.empty()) emit(bench_csv, bench_to_csv(reports));
    } else if (*cmd_util) {
      const ModelWeights model = load_model(util_model);
      const int64_t vocab = model.config.backbone.vocab_size;
      std::vector<std::vector<int32_t>> prompts;
      for (const std::string& path : split_paths(util_prompts)) {
        for (auto& chunk :
             chunk_tokens(load_prompt_tokens(path, vocab), util_seq)) {
          prompts.push_back(std::move(chunk));
        }
      }
      if (prompts.empty()) throw DomainError("no usable prompt tokens");
      emit(util_output, utilization_to_csv(expert_utilization(model, prompts)));
    }
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << std::endl;
    return 2;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}

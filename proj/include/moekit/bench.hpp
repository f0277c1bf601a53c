#pragma once

#include <chrono>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "moekit/kernel.hpp"
#include "moekit/text.hpp"

namespace moekit {

// One measured phase (prefill or decode) for one prompt domain. Means are
// over the timed repeats; per-run values are retained.
struct BenchReport {
  std::string phase;          // "prefill" | "decode"
  std::string prompt_domain;  // file stem or tag
  int64_t input_len = 0;
  int64_t output_len = 0;
  int64_t tokens = 0;         // tokens processed per run in this phase
  double wall_time = 0.0;     // seconds, mean over runs
  double throughput = 0.0;    // tokens / wall_time
  std::vector<double> run_wall_times;
  std::map<std::string, double> per_op;  // seconds, mean over runs
  int64_t distinct_experts = 0;          // activated anywhere during the run
  double speedup_vs_naive = 0.0;         // fused prefill vs naive prefill
};

struct BenchOptions {
  std::vector<int64_t> input_lens = {32};
  std::vector<int64_t> output_lens = {16};
  int repeats = 3;
  bool use_fused = true;
};

namespace benchdetail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

inline std::vector<int32_t> fit_length(const std::vector<int32_t>& tokens,
                                       int64_t len) {
  if (tokens.empty()) throw DomainError("prompt produced no tokens");
  std::vector<int32_t> out;
  out.reserve(len);
  for (int64_t i = 0; i < len; ++i) {
    out.push_back(tokens[i % tokens.size()]);
  }
  return out;
}

inline int64_t count_distinct_experts(const ForwardOutput& out) {
  std::set<std::pair<int64_t, int64_t>> seen;
  for (size_t l = 0; l < out.layer_loads.size(); ++l) {
    for (size_t e = 0; e < out.layer_loads[l].size(); ++e) {
      if (out.layer_loads[l][e] > 0) seen.insert({(int64_t)l, (int64_t)e});
    }
  }
  return static_cast<int64_t>(seen.size());
}

}  // namespace benchdetail

// Runs prefill + decode over each (domain, input_len, output_len)
// combination. One untimed warm-up run precedes `repeats` timed runs; the
// naive-vs-fused ratio is measured on the prefill of each combination.
inline std::vector<BenchReport> run_bench(
    const InferenceEngine& eng,
    const std::vector<std::pair<std::string, std::vector<int32_t>>>& domains,
    const BenchOptions& opts) {
  if (domains.empty()) throw DomainError("bench needs at least one prompt domain");
  if (opts.repeats < 1) throw DomainError("repeats must be >= 1");
  std::vector<BenchReport> reports;

  for (const auto& [domain, raw_tokens] : domains) {
    for (int64_t in_len : opts.input_lens) {
      for (int64_t out_len : opts.output_lens) {
        const auto prompt = benchdetail::fit_length(raw_tokens, in_len);

        BenchReport prefill;
        prefill.phase = "prefill";
        prefill.prompt_domain = domain;
        prefill.input_len = in_len;
        prefill.output_len = out_len;
        prefill.tokens = in_len;
        BenchReport decode = prefill;
        decode.phase = "decode";
        decode.tokens = out_len;

        // warm-up, excluded from means
        {
          KvCache cache;
          engine_forward(eng, prompt, &cache, opts.use_fused);
        }

        std::map<std::string, double> prefill_ops, decode_ops;
        int64_t distinct = 0;
        for (int r = 0; r < opts.repeats; ++r) {
          KvCache cache;
          eng.reset_timers();
          auto t0 = std::chrono::steady_clock::now();
          ForwardOutput out = engine_forward(eng, prompt, &cache, opts.use_fused);
          const double ttft = benchdetail::seconds_since(t0);
          prefill.run_wall_times.push_back(ttft);
          prefill_ops["attention"] += eng.attention_s;
          prefill_ops["moe"] += eng.moe_s;
          prefill_ops["other"] += eng.other_s;
          distinct = std::max(distinct, benchdetail::count_distinct_experts(out));

          eng.reset_timers();
          const int64_t vocab = eng.model.config.backbone.vocab_size;
          int32_t next = argmax_token(&out.logits[(prompt.size() - 1) * vocab], vocab);
          t0 = std::chrono::steady_clock::now();
          for (int64_t i = 0; i < out_len; ++i) {
            out = engine_forward(eng, {next}, &cache, opts.use_fused);
            next = argmax_token(out.logits.data(), vocab);
          }
          decode.run_wall_times.push_back(benchdetail::seconds_since(t0));
          decode_ops["attention"] += eng.attention_s;
          decode_ops["moe"] += eng.moe_s;
          decode_ops["other"] += eng.other_s;
        }

        auto finish = [&](BenchReport& r, std::map<std::string, double>& ops) {
          double sum = 0.0;
          for (double v : r.run_wall_times) sum += v;
          r.wall_time = sum / r.run_wall_times.size();
          r.throughput = r.wall_time > 0.0 ? r.tokens / r.wall_time : 0.0;
          for (auto& [k, v] : ops) r.per_op[k] = v / opts.repeats;
          r.distinct_experts = distinct;
        };
        finish(prefill, prefill_ops);
        finish(decode, decode_ops);

        // fused vs naive, one prefill each
        {
          KvCache c1;
          auto t0 = std::chrono::steady_clock::now();
          engine_forward(eng, prompt, &c1, true);
          const double fused_s = benchdetail::seconds_since(t0);
          KvCache c2;
          t0 = std::chrono::steady_clock::now();
          engine_forward(eng, prompt, &c2, false);
          const double naive_s = benchdetail::seconds_since(t0);
          const double ratio = fused_s > 0.0 ? naive_s / fused_s : 0.0;
          prefill.speedup_vs_naive = ratio;
          decode.speedup_vs_naive = ratio;
        }

        reports.push_back(std::move(prefill));
        reports.push_back(std::move(decode));
      }
    }
  }
  return reports;
}

inline nlohmann::json to_json(const BenchReport& r) {
  nlohmann::json ops = nlohmann::json::object();
  for (const auto& [k, v] : r.per_op) ops[k] = v;
  return {{"phase", r.phase},
          {"prompt_domain", r.prompt_domain},
          {"input_len", r.input_len},
          {"output_len", r.output_len},
          {"tokens", r.tokens},
          {"wall_time_s", r.wall_time},
          {"throughput_tps", r.throughput},
          {"run_wall_times_s", r.run_wall_times},
          {"per_op_s", ops},
          {"distinct_experts", r.distinct_experts},
          {"speedup_vs_naive", r.speedup_vs_naive}};
}

inline nlohmann::json to_json(const std::vector<BenchReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(to_json(r));
  return arr;
}

// CSV flattening: phase,domain,input_len,output_len,run,ttft_s,decode_tps
inline std::string bench_to_csv(const std::vector<BenchReport>& reports) {
  std::string out = "phase,domain,input_len,output_len,run,ttft_s,decode_tps\n";
  char buf[256];
  for (const auto& r : reports) {
    for (size_t run = 0; run < r.run_wall_times.size(); ++run) {
      const double wall = r.run_wall_times[run];
      if (r.phase == "prefill") {
        std::snprintf(buf, sizeof(buf), "prefill,%s,%lld,%lld,%zu,%.6f,\n",
                      r.prompt_domain.c_str(), (long long)r.input_len,
                      (long long)r.output_len, run, wall);
      } else {
        const double tps = wall > 0.0 ? r.tokens / wall : 0.0;
        std::snprintf(buf, sizeof(buf), "decode,%s,%lld,%lld,%zu,,%.3f\n",
                      r.prompt_domain.c_str(), (long long)r.input_len,
                      (long long)r.output_len, run, tps);
      }
      out += buf;
    }
  }
  return out;
}

}  // namespace moekit

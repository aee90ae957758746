// Command-line front end: entropy profiling, budget allocation, trace
// compression, end-to-end runs and strategy sweeps over the desk-scale
// decoder. Exit codes: 0 ok, 1 usage/config, 2 contract violation,
// 3 file I/O, 4 malformed trace.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "meda/meda.hpp"

namespace {

struct Options {
    // model
    std::uint64_t seed = 7;
    std::size_t layers = 8;
    std::size_t heads = 4;
    std::size_t dim = 32;
    bool scale_by_model_dim = false;

    // synthetic workload
    std::size_t prompt_len = 256;
    std::size_t lead_text = 2;
    std::size_t tail_text = 2;
    std::size_t needles = 3;
    double base_scale = 20.0;
    double needle_gain = 4.0;
    double probe_gain = 1.2;
    double haystack_gain = 0.35;

    // compression
    double rho = 0.5;
    double recent_ratio = 0.75;
    std::string strategy = "meda";
    bool no_merge = false;
    bool no_text_boost = false;
    bool causal_cross = false;

    // io
    std::string trace_path;
    std::string out_path;
    std::string dump_trace_path;
    bool text_encoding = false;
    std::size_t steps = 8;

    // compare
    std::vector<double> rhos = {0.1, 0.2, 0.35, 0.5, 0.8};
    std::size_t num_workloads = 8;
    bool with_timing = false;

    meda::ModelConfig model() const {
        meda::ModelConfig cfg;
        cfg.num_layers = layers;
        cfg.num_heads = heads;
        cfg.model_dim = dim;
        cfg.seed = seed;
        cfg.scale_by_model_dim = scale_by_model_dim;
        cfg.validate();
        return cfg;
    }

    meda::WorkloadSpec workload(std::uint64_t workload_seed) const {
        meda::WorkloadSpec spec;
        spec.seed = workload_seed;
        spec.prompt_len = prompt_len;
        spec.lead_text = lead_text;
        spec.tail_text = tail_text;
        spec.needle_count = needles;
        spec.base_scale = base_scale;
        spec.needle_gain = needle_gain;
        spec.probe_gain = probe_gain;
        spec.haystack_gain = haystack_gain;
        spec.validate();
        return spec;
    }

    meda::CompressionConfig compression() const {
        meda::CompressionConfig cfg;
        cfg.rho = rho;
        cfg.recent_ratio = recent_ratio;
        cfg.strategy = meda::parse_strategy(strategy);
        cfg.merge_enabled = !no_merge;
        cfg.text_boost_enabled = !no_text_boost;
        cfg.causal_cross_attention = causal_cross;
        cfg.validate();
        return cfg;
    }
};

void add_model_options(CLI::App* cmd, Options& opt) {
    cmd->add_option("--seed", opt.seed, "model and workload seed");
    cmd->add_option("--layers", opt.layers, "decoder layers");
    cmd->add_option("--heads", opt.heads, "attention heads");
    cmd->add_option("--dim", opt.dim, "model dimension (divisible by heads)");
    cmd->add_flag("--scale-by-model-dim", opt.scale_by_model_dim,
                  "divide attention logits by sqrt(model_dim) instead of sqrt(head_dim)");
}

void add_workload_options(CLI::App* cmd, Options& opt) {
    cmd->add_option("--prompt-len", opt.prompt_len, "synthetic prompt length");
    cmd->add_option("--lead-text", opt.lead_text, "text tokens at the start");
    cmd->add_option("--tail-text", opt.tail_text, "text tokens at the end");
    cmd->add_option("--needles", opt.needles, "planted high-attention vision tokens");
    cmd->add_option("--base-scale", opt.base_scale, "typical embedding norm");
    cmd->add_option("--needle-gain", opt.needle_gain, "needle strength relative to base");
    cmd->add_option("--probe-gain", opt.probe_gain, "text-token planted component");
    cmd->add_option("--haystack-gain", opt.haystack_gain, "vision-token planted component");
}

void add_compression_options(CLI::App* cmd, Options& opt) {
    cmd->add_option("--rho", opt.rho, "fraction of the prompt cache to keep, (0,1]");
    cmd->add_option("--recent-ratio", opt.recent_ratio,
                    "recent-window share of each layer budget");
    cmd->add_option("--strategy", opt.strategy, "meda | uniform | pyramid")
        ->check(CLI::IsMember({"meda", "uniform", "pyramid"}));
    cmd->add_flag("--no-merge", opt.no_merge, "evict instead of merging");
    cmd->add_flag("--no-text-boost", opt.no_text_boost, "disable text score boosting");
    cmd->add_flag("--causal-cross", opt.causal_cross,
                  "restrict cross-modal attention causally (ablation)");
}

void configure(CLI::App* cmd, Options& opt) {
    cmd->set_config("--config", "", "structured-text config file (ini); flags override it");
    add_model_options(cmd, opt);
    add_workload_options(cmd, opt);
    add_compression_options(cmd, opt);
    cmd->add_option("--trace", opt.trace_path, "input trace file (binary or text)");
    cmd->add_option("--out", opt.out_path, "output path (default: stdout)");
    cmd->add_option("--steps", opt.steps, "decode steps");
    cmd->add_flag("--text", opt.text_encoding, "write traces in the text encoding");
}

void emit(const Options& opt, const std::string& payload) {
    if (opt.out_path.empty()) {
        std::cout << payload;
        return;
    }
    std::ofstream os(opt.out_path);
    if (!os) {
        throw meda::IoError("cannot open " + opt.out_path + " for writing");
    }
    os << payload;
    if (!os) {
        throw meda::IoError("write failed on " + opt.out_path);
    }
}

meda::EntropyProfile profile_from_options(const Options& opt, std::vector<std::size_t>* full_len) {
    if (!opt.trace_path.empty()) {
        meda::TraceFile t = meda::read_trace(opt.trace_path);
        meda::LayerProjections proj;
        proj.num_heads = t.num_heads;
        proj.scale = std::sqrt(
            static_cast<double>(opt.scale_by_model_dim ? t.model_dim : t.head_dim));
        proj.causal_cross_attention = opt.causal_cross;
        for (const meda::TraceLayer& layer : t.layers) {
            if (!layer.has_q()) {
                throw meda::ContractError("trace has no Q tensors; cannot profile");
            }
            const std::size_t tokens = layer.token_count();
            meda::Matrix q(tokens, t.model_dim), k(tokens, t.model_dim);
            for (std::uint32_t h = 0; h < t.num_heads; ++h) {
                for (std::size_t i = 0; i < tokens; ++i) {
                    for (std::uint32_t d = 0; d < t.head_dim; ++d) {
                        q.at(i, h * t.head_dim + d) = layer.q[h][i * t.head_dim + d];
                        k.at(i, h * t.head_dim + d) = layer.k[h][i * t.head_dim + d];
                    }
                }
            }
            proj.q.push_back(std::move(q));
            proj.k.push_back(std::move(k));
            if (proj.modality.empty()) {
                for (std::uint32_t p : layer.positions) {
                    proj.modality.push_back(t.modality[p]);
                    proj.positions.push_back(p);
                }
            }
            full_len->push_back(tokens);
        }
        return meda::profile_layers(proj);
    }
    const meda::ModelConfig mcfg = opt.model();
    meda::PromptSequence prompt = meda::generate_workload(opt.workload(opt.seed), mcfg);
    meda::EncodeResult enc = meda::prompt_encode(prompt, mcfg);
    full_len->assign(mcfg.num_layers, prompt.length());
    return meda::profile_from_encode(enc, prompt, mcfg, opt.causal_cross);
}

int cmd_profile(const Options& opt) {
    std::vector<std::size_t> full_len;
    meda::EntropyProfile prof = profile_from_options(opt, &full_len);
    emit(opt, meda::profile_to_csv(prof));
    return 0;
}

int cmd_allocate(const Options& opt) {
    std::vector<std::size_t> full_len;
    meda::EntropyProfile prof = profile_from_options(opt, &full_len);
    meda::AllocationPlan plan = meda::allocate(prof, opt.compression(), full_len);
    emit(opt, meda::plan_to_csv(plan));
    return 0;
}

int cmd_compress(const Options& opt) {
    if (opt.trace_path.empty()) {
        throw CLI::ValidationError("compress requires --trace");
    }
    if (opt.out_path.empty()) {
        throw CLI::ValidationError("compress requires --out");
    }
    meda::TraceFile t = meda::read_trace(opt.trace_path);
    meda::TraceFile compressed =
        meda::compress_trace(t, opt.compression(), opt.scale_by_model_dim);
    meda::write_trace(opt.out_path, compressed,
                      opt.text_encoding ? meda::TraceEncoding::Text : meda::TraceEncoding::Binary);
    std::size_t before = 0, after = 0;
    for (const auto& layer : t.layers) {
        before += layer.token_count();
    }
    for (const auto& layer : compressed.layers) {
        after += layer.token_count();
    }
    std::cout << "compressed " << before << " -> " << after << " cached tokens across "
              << t.num_layers << " layers\n";
    return 0;
}

int cmd_run(const Options& opt) {
    const meda::ModelConfig mcfg = opt.model();
    const meda::CompressionConfig ccfg = opt.compression();
    meda::PromptSequence prompt = meda::generate_workload(opt.workload(opt.seed), mcfg);
    meda::PipelineInputs in =
        meda::prepare_pipeline(prompt, mcfg, opt.steps, ccfg.causal_cross_attention);
    if (!opt.dump_trace_path.empty()) {
        meda::write_trace(opt.dump_trace_path, meda::trace_from_encode(in.encode, in.prompt, mcfg),
                          opt.text_encoding ? meda::TraceEncoding::Text
                                            : meda::TraceEncoding::Binary);
    }
    meda::RunReport rep = meda::evaluate_pipeline(in, ccfg);
    emit(opt, rep.to_csv(opt.with_timing));

    std::ostringstream os;
    os.precision(6);
    os << "strategy " << rep.strategy << (rep.merge ? "" : "-evict") << "  rho " << rep.rho
       << "  fidelity " << rep.fidelity << "  memory " << rep.compressed_memory_gib << " / "
       << rep.full_memory_gib << " GiB (" << 100.0 * rep.memory_ratio << "%)";
    if (rep.needle_retention >= 0.0) {
        os << "  needle retention " << rep.needle_retention;
    }
    os << "  decode " << rep.decode_ms_per_token << " ms/token\n";
    std::cerr << os.str();
    return 0;
}

int cmd_compare(const Options& opt) {
    const meda::ModelConfig mcfg = opt.model();
    std::vector<meda::WorkloadSpec> specs;
    for (std::size_t i = 0; i < opt.num_workloads; ++i) {
        specs.push_back(opt.workload(opt.seed + i));
    }
    std::vector<meda::CompareRow> rows =
        meda::compare_strategies(specs, mcfg, opt.rhos, opt.compression(), opt.steps);
    emit(opt, meda::compare_to_csv(rows, opt.with_timing));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    Options opt;
    CLI::App app{"MEDA-style KV cache compression engine"};
    app.require_subcommand(1);

    CLI::App* profile = app.add_subcommand("profile", "cross-modal attention entropy per layer");
    CLI::App* allocate = app.add_subcommand("allocate", "per-layer cache budget plan");
    CLI::App* compress = app.add_subcommand("compress", "compress the KV tensors in a trace");
    CLI::App* run = app.add_subcommand("run", "end-to-end run on a synthetic workload");
    CLI::App* compare = app.add_subcommand("compare", "sweep strategies over rho values");
    for (CLI::App* cmd : {profile, allocate, compress, run, compare}) {
        configure(cmd, opt);
    }
    run->add_option("--dump-trace", opt.dump_trace_path,
                    "also dump the uncompressed encode trace to this path");
    run->add_flag("--with-timing", opt.with_timing, "include measured latency in the report");
    compare->add_option("--rhos", opt.rhos, "rho values to sweep")->delimiter(',');
    compare->add_option("--workloads", opt.num_workloads, "number of seeded workloads");
    compare->add_flag("--with-timing", opt.with_timing, "include measured latency in the CSV");

    try {
        app.parse(argc, argv);
        if (profile->parsed()) {
            return cmd_profile(opt);
        }
        if (allocate->parsed()) {
            return cmd_allocate(opt);
        }
        if (compress->parsed()) {
            return cmd_compress(opt);
        }
        if (run->parsed()) {
            return cmd_run(opt);
        }
        if (compare->parsed()) {
            return cmd_compare(opt);
        }
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const meda::TraceError& e) {
        std::cerr << "trace error: " << e.what() << '\n';
        return 4;
    } catch (const meda::IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return 3;
    } catch (const meda::ShapeError& e) {
        std::cerr << "shape error: " << e.what() << '\n';
        return 2;
    } catch (const meda::ContractError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << '\n';
        return 2;
    }
}

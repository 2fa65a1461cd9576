#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "qmerge/ar_prior.hpp"
#include "qmerge/npy.hpp"
#include "qmerge/pipeline.hpp"
#include "qmerge/report.hpp"
#include "qmerge/synthetic.hpp"

namespace qmerge::cli {

namespace {

/// Raised for bad flags or values; maps to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PipelineFlags {
    double alpha = 0.45;
    double tau = 1.0;
    double epsilon = kDefaultEpsilon;
    double delta = kDefaultDelta;
    std::optional<std::size_t> k_max;
    std::size_t k_min = 1;
    bool invert_entropy = true;
    std::string cluster = "agglomerative";
    std::size_t knn_neighbors = 5;
    std::optional<std::uint64_t> seed;
    bool soft = false;

    void attach(CLI::App* app) {
        app->add_option("--alpha", alpha, "entropy threshold for the token budget")->check(CLI::Range(0.0, 1.0));
        app->add_option("--tau", tau, "Gumbel-softmax temperature")->check(CLI::PositiveNumber);
        app->add_option("--epsilon", epsilon, "floor mass for unselected tokens");
        app->add_option("--delta", delta, "NED stabilizer");
        app->add_option("--kmax", k_max, "maximum merged token count")->check(CLI::PositiveNumber);
        app->add_option("--kmin", k_min, "minimum merged token count")->check(CLI::PositiveNumber);
        app->add_flag("--invert-entropy,!--no-invert-entropy", invert_entropy,
                      "low attention entropy means high saliency (default on)");
        app->add_option("--cluster", cluster, "agglomerative | knn")
            ->check(CLI::IsMember({"agglomerative", "agglomerative-cosine", "knn"}));
        app->add_option("--knn-neighbors", knn_neighbors)->check(CLI::PositiveNumber);
        app->add_option("--seed", seed, "run seed (falls back to $QM_SEED, then 0)");
        app->add_flag("--soft", soft, "use the soft Gumbel-softmax mask instead of hard top-K");
    }

    PipelineConfig resolve() const {
        PipelineConfig cfg;
        cfg.alpha = alpha;
        cfg.tau = tau;
        cfg.epsilon = epsilon;
        cfg.delta = delta;
        cfg.k_max = k_max;
        cfg.k_min = k_min;
        cfg.invert_entropy = invert_entropy;
        cfg.cluster_method = parse_cluster_method(cluster);
        cfg.knn_neighbors = knn_neighbors;
        cfg.hard_selection = !soft;
        cfg.seed = seed ? *seed : env_seed();
        cfg.validate();
        return cfg;
    }

    static std::uint64_t env_seed() {
        const char* text = std::getenv("QM_SEED");
        if (!text || !*text) return 0;
        char* end = nullptr;
        const auto value = std::strtoull(text, &end, 10);
        if (*end != '\0') throw UsageError("QM_SEED is not an unsigned integer: " + std::string(text));
        return value;
    }
};

void write_json(const nlohmann::json& doc, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(Errc::io_failure, "cannot open " + path + " for writing");
    out << doc.dump(2) << '\n';
    if (!out) throw Error(Errc::io_failure, "write failed for " + path);
}

std::vector<EmbeddingStack> load_inputs(const std::string& input, const std::string& attention) {
    const NpyArray arr = read_npy(input);
    std::vector<EmbeddingStack> stacks;
    if (arr.shape.size() == 4) {
        // B x L x N x D batch.
        const auto values = arr.values();
        const std::size_t b = arr.shape[0];
        const std::size_t per = arr.shape[1] * arr.shape[2] * arr.shape[3];
        for (std::size_t i = 0; i < b; ++i) {
            std::vector<double> chunk(values.begin() + static_cast<std::ptrdiff_t>(i * per),
                                      values.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
            stacks.push_back(npy_to_stack(NpyArray::from_values({arr.shape[1], arr.shape[2], arr.shape[3]}, chunk)));
        }
    } else {
        stacks.push_back(npy_to_stack(arr));
    }
    if (!attention.empty()) {
        if (stacks.size() != 1) throw UsageError("--attention is only supported for a single stack");
        const EmbeddingStack att = npy_to_stack(read_npy(attention));
        stacks.front().attention = att.layers;
    }
    for (const auto& s : stacks) {
        try {
            s.validate();
        } catch (const Error& e) {
            throw UsageError(std::string("input: ") + e.what());
        }
    }
    return stacks;
}

std::string indexed_path(const std::string& path, std::size_t index) {
    const std::filesystem::path p(path);
    return (p.parent_path() / (p.stem().string() + "." + std::to_string(index) + p.extension().string())).string();
}

// ---- compress ---------------------------------------------------------------

struct CompressCmd {
    std::string input, output, report, attention, prior, predictions;
    std::size_t threads = 1;
    PipelineFlags flags;

    void attach(CLI::App* app) {
        app->add_option("--input", input, "N x D, L x N x D, or B x L x N x D embeddings (.npy)")->required();
        app->add_option("--output", output, "merged K x D tokens (.npy)");
        app->add_option("--report", report, "JSON report path");
        app->add_option("--attention", attention, "optional captured L x N x N attention (.npy)");
        app->add_option("--prior", prior, "forward prior checkpoint; enables decoding");
        app->add_option("--predictions", predictions, "decoded next-token predictions (.npy)");
        app->add_option("--threads", threads, "worker threads for batch input")->check(CLI::PositiveNumber);
        flags.attach(app);
    }

    int run(std::ostream& out) const {
        const PipelineConfig cfg = flags.resolve();
        const auto stacks = load_inputs(input, attention);
        std::optional<PriorModel> model;
        if (!prior.empty()) {
            model = load_checkpoint(prior);
            if (model->direction() != Direction::forward)
                throw Error(Errc::invalid_direction, "decode: --prior must be a forward checkpoint");
        }

        std::vector<RunResult> results;
        if (stacks.size() == 1) {
            results.push_back(model ? compress_and_decode(stacks.front(), cfg, *model) : compress(stacks.front(), cfg));
        } else {
            if (model) throw UsageError("--prior is only supported for a single stack");
            BatchOptions opts;
            opts.threads = threads;
            auto items = batch_compress(stacks, cfg, opts);
            for (std::size_t i = 0; i < items.size(); ++i) {
                if (!items[i].ok()) throw Error(*items[i].error_code, "item " + std::to_string(i) + ": " + items[i].error_message);
                results.push_back(std::move(*items[i].result));
            }
        }

        std::vector<nlohmann::json> items;
        for (std::size_t i = 0; i < results.size(); ++i) {
            items.push_back(run_item_json(results[i], i, stacks[i].dim()));
            if (!output.empty()) {
                const auto path = results.size() == 1 ? output : indexed_path(output, i);
                write_npy(npy_from_matrix(results[i].merged.tokens), path);
            }
            if (!predictions.empty() && results[i].predictions)
                write_npy(npy_from_matrix(*results[i].predictions), predictions);
            out << "item " << i << ": N=" << results[i].fidelity.n << " K=" << results[i].fidelity.k
                << " comp_rate=" << results[i].fidelity.comp_rate << " gamma=" << results[i].fidelity.gamma
                << " bound_holds=" << (results[i].fidelity.bound_holds ? "true" : "false") << '\n';
        }
        if (!report.empty()) write_json(build_report("compress", config_to_json(cfg), items), report);
        return kExitOk;
    }
};

// ---- saliency ---------------------------------------------------------------

struct SaliencyCmd {
    std::string input, output, attention;
    bool invert_entropy = true;
    double delta = kDefaultDelta;

    void attach(CLI::App* app) {
        app->add_option("--input", input, "N x D or L x N x D embeddings (.npy)")->required();
        app->add_option("--output", output, "saliency profile (.json); stdout when omitted");
        app->add_option("--attention", attention, "optional captured L x N x N attention (.npy)");
        app->add_flag("--invert-entropy,!--no-invert-entropy", invert_entropy);
        app->add_option("--delta", delta)->check(CLI::PositiveNumber);
    }

    int run(std::ostream& out) const {
        const auto stacks = load_inputs(input, attention);
        if (stacks.size() != 1) throw UsageError("saliency takes a single stack");
        const auto profile = profile_saliency(stacks.front(), invert_entropy, delta);
        nlohmann::json doc = saliency_json(profile);
        doc["invert_entropy"] = invert_entropy;
        doc["delta"] = delta;
        if (output.empty())
            out << doc.dump(2) << '\n';
        else
            write_json(doc, output);
        return kExitOk;
    }
};

// ---- train-prior ------------------------------------------------------------

struct TrainCmd {
    std::string corpus, prefix;
    PriorConfig cfg;

    void attach(CLI::App* app) {
        app->add_option("--corpus", corpus, "B x K x D merged sequences (.npy)")->required();
        app->add_option("--output-prefix", prefix, "writes <prefix>.fwd.qmp, <prefix>.bwd.qmp, <prefix>.trace.json")
            ->required();
        app->add_option("--epochs", cfg.epochs);
        app->add_option("--lr", cfg.learn_rate)->check(CLI::NonNegativeNumber);
        app->add_option("--momentum", cfg.momentum)->check(CLI::Range(0.0, 0.999));
        app->add_option("--layers", cfg.layers);
        app->add_option("--model-dim", cfg.model_dim)->check(CLI::PositiveNumber);
        app->add_option("--heads", cfg.heads)->check(CLI::PositiveNumber);
        app->add_option("--context", cfg.context)->check(CLI::PositiveNumber);
        app->add_option("--seed", cfg.seed);
        app->add_flag("--residual-input", cfg.residual_input);
    }

    int run(std::ostream& out) const {
        PriorConfig c = cfg;
        try {
            c.validate();
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
        const auto sequences = npy_to_sequences(read_npy(corpus));
        if (sequences.empty() || sequences.front().rows() == 0) throw UsageError("corpus holds no sequences");
        std::size_t longest = 0;
        for (const auto& s : sequences) longest = std::max(longest, s.rows());
        if (longest > c.context) throw UsageError("corpus sequences exceed --context");
        const std::size_t d = sequences.front().cols();
        PriorModel fwd(c, d, Direction::forward);
        PriorModel bwd(c, d, Direction::backward);
        const auto trace = train(fwd, bwd, sequences, c);
        save_checkpoint(fwd, prefix + ".fwd.qmp");
        save_checkpoint(bwd, prefix + ".bwd.qmp");
        write_json({{"config", prior_config_to_json(c)}, {"loss", trace.loss}}, prefix + ".trace.json");
        out << "L_AR initial=" << trace.loss.front() << " final=" << trace.loss.back() << " epochs=" << c.epochs
            << '\n';
        return kExitOk;
    }
};

// ---- bench ------------------------------------------------------------------

struct BenchCmd {
    std::string input, report;
    std::size_t repeats = 1;
    std::size_t threads = 1;
    SyntheticSpec synth{128, 16, 3, 54, 0.05, 0};
    PipelineFlags flags;

    void attach(CLI::App* app) {
        app->add_option("--input", input, "embeddings (.npy); a synthetic fixture is generated when omitted");
        app->add_option("--report", report, "JSON report path");
        app->add_option("--repeats", repeats)->check(CLI::PositiveNumber);
        app->add_option("--threads", threads)->check(CLI::PositiveNumber);
        app->add_option("--n", synth.n, "synthetic token count");
        app->add_option("--d", synth.d, "synthetic dim");
        app->add_option("--layers", synth.layers, "synthetic layer count");
        app->add_option("--clusters", synth.clusters, "synthetic cluster count");
        app->add_option("--noise", synth.noise, "synthetic noise scale");
        app->add_option("--synthetic-seed", synth.seed);
        flags.attach(app);
    }

    int run(std::ostream& out) const {
        const PipelineConfig cfg = flags.resolve();
        std::vector<EmbeddingStack> base;
        if (input.empty()) {
            try {
                base.push_back(generate_synthetic(synth).stack);
            } catch (const Error& e) {
                throw UsageError(e.what());
            }
        } else {
            base = load_inputs(input, "");
        }
        std::vector<EmbeddingStack> stacks;
        for (std::size_t r = 0; r < repeats; ++r) stacks.insert(stacks.end(), base.begin(), base.end());

        // Repeats share a stream so every non-timing column is identical across them.
        BatchOptions opts;
        opts.threads = threads;
        opts.shared_stream = true;
        const auto items = batch_compress(stacks, cfg, opts);
        std::vector<nlohmann::json> docs;
        StageTimings sum;
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (!items[i].ok()) throw Error(*items[i].error_code, items[i].error_message);
            const auto& r = *items[i].result;
            docs.push_back(run_item_json(r, i, stacks[i].dim()));
            sum.saliency_ms += r.timings.saliency_ms;
            sum.budget_ms += r.timings.budget_ms;
            sum.selection_ms += r.timings.selection_ms;
            sum.cluster_ms += r.timings.cluster_ms;
            sum.merge_ms += r.timings.merge_ms;
            sum.fidelity_ms += r.timings.fidelity_ms;
            sum.total_ms += r.timings.total_ms;
        }
        const auto doc = build_report("bench", config_to_json(cfg), docs);
        const auto& agg = doc["aggregate"];
        const double count = static_cast<double>(items.size());
        out << std::fixed << std::setprecision(4);
        out << "metric                  value\n";
        out << "tokens_before (mean)    " << agg["n"]["mean"].get<double>() << '\n';
        out << "tokens_after (mean)     " << agg["k"]["mean"].get<double>() << '\n';
        out << "tokens_after (stddev)   " << agg["k"]["stddev"].get<double>() << '\n';
        out << "comp_rate               " << agg["comp_rate"]["mean"].get<double>() << '\n';
        out << "flop_speedup            " << agg["flop_speedup"]["mean"].get<double>() << '\n';
        out << "gamma                   " << agg["gamma"]["mean"].get<double>() << '\n';
        out << "bound_holds_fraction    " << agg["bound_holds_fraction"].get<double>() << '\n';
        out << "saliency_ms (mean)      " << sum.saliency_ms / count << '\n';
        out << "budget_ms (mean)        " << sum.budget_ms / count << '\n';
        out << "selection_ms (mean)     " << sum.selection_ms / count << '\n';
        out << "cluster_ms (mean)       " << sum.cluster_ms / count << '\n';
        out << "merge_ms (mean)         " << sum.merge_ms / count << '\n';
        out << "fidelity_ms (mean)      " << sum.fidelity_ms / count << '\n';
        out << "total_ms (mean)         " << sum.total_ms / count << '\n';
        if (!report.empty()) write_json(doc, report);
        return kExitOk;
    }
};

// ---- gen-synthetic ----------------------------------------------------------

struct GenCmd {
    SyntheticSpec spec;
    std::string output, truth;

    void attach(CLI::App* app) {
        app->add_option("--n", spec.n);
        app->add_option("--d", spec.d);
        app->add_option("--layers", spec.layers);
        app->add_option("--clusters", spec.clusters);
        app->add_option("--noise", spec.noise);
        app->add_option("--seed", spec.seed);
        app->add_option("--output", output, "L x N x D stack (.npy)")->required();
        app->add_option("--truth", truth, "ground-truth sidecar (default <output>.truth.json)");
    }

    int run(std::ostream& out) const {
        SyntheticData data;
        try {
            data = generate_synthetic(spec);
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
        write_npy(npy_from_stack(data.stack), output);
        const std::string truth_path = truth.empty() ? output + ".truth.json" : truth;
        write_json(synthetic_to_json(spec, data.assignment), truth_path);
        out << "wrote " << output << " (" << spec.layers << "x" << spec.n << "x" << spec.d << ") and " << truth_path
            << '\n';
        return kExitOk;
    }
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"qmerge: entropy-guided token merging for embedding sequences"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    CompressCmd compress_cmd;
    SaliencyCmd saliency_cmd;
    TrainCmd train_cmd;
    BenchCmd bench_cmd;
    GenCmd gen_cmd;
    auto* c = app.add_subcommand("compress", "merge an embedding stack down to K tokens");
    compress_cmd.attach(c);
    auto* s = app.add_subcommand("saliency", "per-token entropy saliency and NED diagnostics");
    saliency_cmd.attach(s);
    auto* t = app.add_subcommand("train-prior", "train the bidirectional autoregressive prior");
    train_cmd.attach(t);
    auto* b = app.add_subcommand("bench", "token-count, compression and FLOP table");
    bench_cmd.attach(b);
    auto* g = app.add_subcommand("gen-synthetic", "cluster-structured synthetic embedding stacks");
    gen_cmd.attach(g);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\nrun with --help for usage\n";
        return kExitInputError;
    }

    try {
        if (c->parsed()) return compress_cmd.run(out);
        if (s->parsed()) return saliency_cmd.run(out);
        if (t->parsed()) return train_cmd.run(out);
        if (b->parsed()) return bench_cmd.run(out);
        if (g->parsed()) return gen_cmd.run(out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitInputError;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return e.is_input_error() ? kExitInputError : kExitPipelineError;
    }
    return kExitInputError;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv;
    argv.push_back("qmerge");
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace qmerge::cli

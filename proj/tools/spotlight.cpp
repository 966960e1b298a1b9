// Operator entry point: generate | train | eval | bench.
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <new>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spotlight/attention_eval.hpp"
#include "spotlight/bitcodes.hpp"
#include "spotlight/errors.hpp"
#include "spotlight/hashers.hpp"
#include "spotlight/rng.hpp"
#include "spotlight/synthkv.hpp"
#include "spotlight/trainer.hpp"

namespace {

using namespace spotlight;

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t hash = 0xCBF29CE484222325ULL;
    for (unsigned char c : text) {
        hash ^= c;
        hash *= 0x100000001B3ULL;
    }
    return hash;
}

std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << content;
    if (!os) throw IoError("write failed: " + path);
}

// Sidecar provenance for binary artifacts whose byte layout is pinned.
void write_meta(const std::string& artifact_path, const std::string& config_hash,
                std::uint64_t seed, const std::string& command) {
    std::ostringstream os;
    os << "artifact " << artifact_path << "\n";
    os << "command " << command << "\n";
    os << "config_hash " << config_hash << "\n";
    os << "seed " << seed << "\n";
    write_text_file(artifact_path + ".meta", os.str());
}

double mean_pairwise_cosine(const Matrix<float>& m) {
    const std::size_t n = m.rows(), d = m.cols();
    std::vector<double> sum(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm += static_cast<double>(m(i, j)) * m(i, j);
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < d; ++j) sum[j] += m(i, j) / norm;
    }
    double s2 = 0.0;
    for (double v : sum) s2 += v * v;
    return n > 1 ? (s2 - static_cast<double>(n)) / (static_cast<double>(n) * (n - 1)) : 1.0;
}

double mean_cross_abs_cosine(const Matrix<float>& a, const Matrix<float>& b,
                             std::uint64_t seed) {
    auto eng = make_engine(seed);
    std::uniform_int_distribution<std::size_t> pa(0, a.rows() - 1), pb(0, b.rows() - 1);
    const int pairs = 20000;
    double acc = 0.0;
    for (int i = 0; i < pairs; ++i) {
        const auto ra = a.row(pa(eng));
        const auto rb = b.row(pb(eng));
        const double num = dot<float>(ra, rb);
        acc += std::abs(num / (norm2<float>(ra) * norm2<float>(rb)));
    }
    return acc / pairs;
}

// ---------------------------------------------------------------- generate

struct GenerateOpts {
    std::uint32_t dim = 128;
    std::uint32_t n_queries = 2048;
    std::uint32_t n_keys = 2048;
    double spread = 0.3;
    double axis_cos = 0.0;
    double norm_mean = 0.0;
    double norm_std = 0.0;
    double outlier_prob = 0.0;
    double outlier_scale = 4.0;
    std::uint64_t seed = 0;
    std::string out = "qk.splq";
};

int run_generate(const GenerateOpts& opts, const std::string& config_hash,
                 const std::string& command) {
    ConeSpec spec;
    spec.dim = opts.dim;
    spec.angular_spread = opts.spread;
    spec.axis_cos = opts.axis_cos;
    spec.norm_mean = opts.norm_mean;
    spec.norm_std = opts.norm_std;
    spec.outlier_prob = opts.outlier_prob;
    spec.outlier_scale = opts.outlier_scale;
    spec.seed = opts.seed;
    const Matrix<float> queries = sample_cone(spec, opts.n_queries, ConeSide::query);
    const Matrix<float> keys = sample_cone(spec, opts.n_keys, ConeSide::key);
    write_dump(opts.out, queries, keys);
    write_meta(opts.out, config_hash, opts.seed, command);

    std::printf("wrote %s (n_queries=%u n_keys=%u d=%u)\n", opts.out.c_str(), opts.n_queries,
                opts.n_keys, opts.dim);
    std::printf("intra-cone mean cosine: queries %.4f keys %.4f\n", mean_pairwise_cosine(queries),
                mean_pairwise_cosine(keys));
    std::printf("cross-cone mean |cosine|: %.4f\n",
                mean_cross_abs_cosine(queries, keys, derive_seed(opts.seed, 777)));
    return 0;
}

// ------------------------------------------------------------------- train

struct TrainOpts {
    std::string dump;
    std::string kind = "mlp";
    std::uint32_t hidden = 128;
    std::uint32_t bits = 128;
    std::uint32_t proj_dim = 0;  // downproj width; 0 selects d/16
    double gamma = 64.0;
    std::string loss = "rank";
    double beta = 1.0;
    double alpha = 3.0;
    double maskout = 0.98;
    std::int64_t max_top = -1;
    std::int64_t max_oth = 256;
    std::int64_t query_subsample = 64;
    TrainConfig train;
    std::string out = "hasher.splh";
    std::string report = "train_report.txt";
};

AnyHasher init_hasher(const TrainOpts& opts, std::uint32_t d) {
    if (opts.kind == "mlp") {
        return mlp_gaussian_init(d, opts.hidden, opts.bits, static_cast<float>(opts.gamma),
                                 derive_seed(opts.train.seed, 100));
    }
    if (opts.kind == "linear") {
        if (opts.bits > d) {
            throw DimensionError("linear hasher: code bits must not exceed the input dimension");
        }
        LinearHasher rot = qr_rotation_init(d, derive_seed(opts.train.seed, 101));
        if (opts.bits == d) return rot;
        Matrix<float> proj(d, opts.bits);
        for (std::uint32_t i = 0; i < d; ++i) {
            for (std::uint32_t j = 0; j < opts.bits; ++j) proj(i, j) = rot.projection(i, j);
        }
        return LinearHasher{std::move(proj)};
    }
    if (opts.kind == "downproj") {
        const std::uint32_t r = opts.proj_dim > 0 ? opts.proj_dim : std::max(1u, d / 16);
        return downproj_init(d, r, derive_seed(opts.train.seed, 102));
    }
    throw DimensionError("unknown hasher kind: " + opts.kind);
}

int run_train(const TrainOpts& opts, const std::string& config_hash,
              const std::string& command) {
    const QkDump dump = read_dump(opts.dump);
    const auto d = static_cast<std::uint32_t>(dump.queries.cols());
    AnyHasher hasher = init_hasher(opts, d);

    RankingLossConfig loss_cfg;
    loss_cfg.beta = opts.beta;
    loss_cfg.alpha = opts.alpha;
    loss_cfg.maskout = opts.maskout;
    if (opts.max_top >= 0) loss_cfg.max_top = static_cast<std::uint32_t>(opts.max_top);
    if (opts.max_oth >= 0) loss_cfg.max_oth = static_cast<std::uint32_t>(opts.max_oth);
    if (opts.query_subsample >= 0) {
        loss_cfg.query_subsample = static_cast<std::uint32_t>(opts.query_subsample);
    }
    const TrainLoss loss_kind =
        (opts.loss == "recon") ? TrainLoss::reconstruction : TrainLoss::ranking;

    const TrainDataset data = dataset_from_dump(dump);
    const TrainReport report = train_hasher(hasher, data, loss_cfg, opts.train, loss_kind);

    write_hasher(opts.out, hasher);
    write_meta(opts.out, config_hash, opts.train.seed, command);
    const std::vector<std::string> header{
        "command " + command,
        "config_hash " + config_hash,
        "seed " + std::to_string(opts.train.seed),
        "hasher " + std::string(hasher_kind_name(hasher)),
        "loss " + opts.loss,
    };
    write_text_file(opts.report, format_train_report(report, header));

    std::printf("trained %s hasher for %u iterations (%s loss) in %.1fs\n",
                hasher_kind_name(hasher), opts.train.num_iters, opts.loss.c_str(),
                report.wall_seconds);
    if (!report.records.empty()) {
        std::printf("first loss %.6f, last loss %.6f, skipped steps %u\n",
                    report.records.front().loss, report.records.back().loss,
                    report.skipped_steps);
    }
    std::printf("holdout IoU %.4f\n", report.final_holdout_iou);
    std::printf("wrote %s and %s\n", opts.out.c_str(), opts.report.c_str());
    return 0;
}

// -------------------------------------------------------------------- eval

struct EvalOpts {
    std::string dump;
    std::vector<std::string> methods{"oracle"};
    std::string lsh_checkpoint;
    std::string mlp_checkpoint;
    std::string downproj_checkpoint;
    std::vector<double> budget_rates{0.02};
    std::uint64_t seed = 0;
    std::string out = "eval_report.txt";
    std::string per_query_csv;
    bool frozen = false;
};

AnyHasher load_checkpoint(const std::string& path, const char* expected_kind) {
    if (path.empty()) {
        throw DimensionError(std::string("method \"") + expected_kind +
                             "\" requested without a checkpoint");
    }
    AnyHasher hasher = read_hasher(path);
    if (std::string(hasher_kind_name(hasher)) != expected_kind) {
        throw FormatError(path + ": checkpoint holds a " +
                          std::string(hasher_kind_name(hasher)) + " hasher, expected " +
                          expected_kind);
    }
    return hasher;
}

int run_eval(const EvalOpts& opts, const std::string& config_hash, const std::string& command) {
    const QkDump dump = read_dump(opts.dump);
    if (dump.queries.rows() != dump.keys.rows()) {
        throw DimensionError("eval expects causally aligned dumps (n_queries == n_keys)");
    }
    const std::size_t n = dump.keys.rows();
    const std::size_t d = dump.keys.cols();

    // The dump carries no value tensor; draw one deterministically from the
    // seed so sparse-output error is measurable.
    Matrix<float> values(n, d);
    auto eng = make_engine(derive_seed(opts.seed, 9000));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        values.data()[i] = static_cast<float>(gauss(eng));
    }
    const AttentionInstance inst =
        make_causal_instance(dump.queries, dump.keys, std::move(values));

    std::vector<AnyHasher> storage;
    storage.reserve(3);
    std::vector<EvalMethodSpec> specs;
    for (const std::string& m : opts.methods) {
        EvalMethodSpec spec;
        spec.name = m;
        spec.frozen = opts.frozen;
        if (m == "oracle") {
            spec.kind = RetrievalMethod::oracle;
        } else if (m == "lsh") {
            spec.kind = RetrievalMethod::lsh;
            storage.push_back(load_checkpoint(opts.lsh_checkpoint, "linear"));
            spec.hasher = &storage.back();
        } else if (m == "mlp") {
            spec.kind = RetrievalMethod::mlp;
            storage.push_back(load_checkpoint(opts.mlp_checkpoint, "mlp"));
            spec.hasher = &storage.back();
        } else if (m == "downproj") {
            spec.kind = RetrievalMethod::downproj;
            storage.push_back(load_checkpoint(opts.downproj_checkpoint, "downproj"));
            spec.hasher = &storage.back();
        } else {
            throw DimensionError("unknown method: " + m);
        }
        specs.push_back(spec);
    }

    std::ostringstream full_report;
    std::ostringstream csv;
    for (const double rate : opts.budget_rates) {
        const EvalReport report = evaluate(inst, specs, rate);
        const std::vector<std::string> header{
            "command " + command,
            "config_hash " + config_hash,
            "seed " + std::to_string(opts.seed),
            "dump " + opts.dump,
        };
        full_report << format_eval_report(report, header);
        if (!opts.per_query_csv.empty()) csv << eval_report_csv(report);

        std::printf("budget rate %.4f -> k=%u\n", rate, report.budget);
        std::printf("%-10s %9s %9s %9s %9s %12s\n", "method", "mean_iou", "p10", "p50", "p90",
                    "mean_rel_err");
        for (const MethodReport& m : report.methods) {
            std::printf("%-10s %9.4f %9.4f %9.4f %9.4f %12.4e\n", m.name.c_str(), m.mean_iou,
                        m.p10_iou, m.p50_iou, m.p90_iou, m.mean_rel_err);
        }
    }
    write_text_file(opts.out, full_report.str());
    if (!opts.per_query_csv.empty()) write_text_file(opts.per_query_csv, csv.str());
    std::printf("wrote %s\n", opts.out.c_str());
    return 0;
}

// ------------------------------------------------------------------- bench

struct BenchOpts {
    std::vector<std::uint64_t> sizes{4096, 65536, 524288};
    std::uint32_t bits = 128;
    std::uint32_t trials = 30;
    std::uint32_t warmup = 5;
    std::uint64_t seed = 0;
    std::string out;
};

double median_us(std::vector<double>& samples) {
    std::sort(samples.begin(), samples.end());
    const std::size_t mid = samples.size() / 2;
    return samples.size() % 2 == 1 ? samples[mid]
                                   : 0.5 * (samples[mid - 1] + samples[mid]);
}

int run_bench(const BenchOpts& opts, const std::string& config_hash,
              const std::string& command) {
    std::ostringstream report;
    report << "# command " << command << "\n# config_hash " << config_hash << "\n";
    report << "# columns: op n median_us trials\n";
    std::printf("%-12s %10s %14s %8s\n", "op", "n", "median_us", "trials");

    bool any_ok = false;
    for (const std::uint64_t n : opts.sizes) {
        try {
            auto eng = make_engine(derive_seed(opts.seed, n));
            BitMatrix bits(static_cast<std::size_t>(n), opts.bits);
            std::bernoulli_distribution coin(0.5);
            for (std::size_t i = 0; i < bits.rows(); ++i) {
                for (std::size_t j = 0; j < opts.bits; ++j) bits.set(i, j, coin(eng));
            }
            CodeMatrix codes = pack_bits(bits);
            const HashCode query = codes.code(0);
            const std::uint32_t k = budget_from_rate(0.02, static_cast<std::size_t>(n));
            std::vector<std::int32_t> scores(static_cast<std::size_t>(n));

            std::vector<double> pack_times, scan_times;
            for (std::uint32_t t = 0; t < opts.warmup + opts.trials; ++t) {
                auto t0 = std::chrono::steady_clock::now();
                CodeMatrix packed = pack_bits(bits);
                auto t1 = std::chrono::steady_clock::now();
                nxor_scores_into({query.words.data(), query.words.size()}, packed,
                                 static_cast<std::uint32_t>(n), scores.data());
                const auto top =
                    top_k_indices<std::int32_t>({scores.data(), scores.size()}, k);
                auto t2 = std::chrono::steady_clock::now();
                if (top.empty()) throw NumericError("bench: empty top-k result");
                if (t < opts.warmup) continue;
                pack_times.push_back(
                    std::chrono::duration<double, std::micro>(t1 - t0).count());
                scan_times.push_back(
                    std::chrono::duration<double, std::micro>(t2 - t1).count());
            }
            const double pack_med = median_us(pack_times);
            const double scan_med = median_us(scan_times);
            char line[160];
            std::snprintf(line, sizeof(line), "pack_bits %llu %.1f %u",
                          static_cast<unsigned long long>(n), pack_med, opts.trials);
            report << line << "\n";
            std::snprintf(line, sizeof(line), "nxor_topk %llu %.1f %u",
                          static_cast<unsigned long long>(n), scan_med, opts.trials);
            report << line << "\n";
            std::printf("%-12s %10llu %14.1f %8u\n", "pack_bits",
                        static_cast<unsigned long long>(n), pack_med, opts.trials);
            std::printf("%-12s %10llu %14.1f %8u\n", "nxor_topk",
                        static_cast<unsigned long long>(n), scan_med, opts.trials);
            any_ok = true;
        } catch (const std::bad_alloc&) {
            std::printf("n=%llu skipped: allocation failed at this size\n",
                        static_cast<unsigned long long>(n));
            report << "# n=" << n << " skipped: allocation failed\n";
        }
    }
    const char* note = "single-thread CPU reference timings; not comparable to GPU kernels";
    std::printf("note: %s\n", note);
    report << "# note: " << note << "\n";
    if (!opts.out.empty()) write_text_file(opts.out, report.str());
    return any_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Learned-hash top-k KV retrieval toolkit"};
    app.set_config("--config", "", "Key-value config file; command line overrides");
    app.require_subcommand(1);

    GenerateOpts gen;
    CLI::App* cmd_gen = app.add_subcommand("generate", "Sample a synthetic query/key dump");
    cmd_gen->add_option("--dim", gen.dim, "Embedding dimension");
    cmd_gen->add_option("--n-queries", gen.n_queries, "Query rows");
    cmd_gen->add_option("--n-keys", gen.n_keys, "Key rows");
    cmd_gen->add_option("--spread", gen.spread, "Cone angular spread (radians)");
    cmd_gen->add_option("--axis-cos", gen.axis_cos, "Cosine between the two cone axes");
    cmd_gen->add_option("--norm-mean", gen.norm_mean, "Magnitude mean (0 = sqrt(dim))");
    cmd_gen->add_option("--norm-std", gen.norm_std, "Magnitude std (0 = mean/10)");
    cmd_gen->add_option("--outlier-prob", gen.outlier_prob, "Heavy-tail magnitude probability");
    cmd_gen->add_option("--outlier-scale", gen.outlier_scale, "Heavy-tail magnitude factor");
    cmd_gen->add_option("--seed", gen.seed, "RNG seed");
    cmd_gen->add_option("--out", gen.out, "Output SPLQ path");

    TrainOpts tr;
    CLI::App* cmd_tr = app.add_subcommand("train", "Train a hasher on a dump");
    cmd_tr->add_option("--dump", tr.dump, "Input SPLQ dump")->required();
    cmd_tr->add_option("--hasher", tr.kind, "Hasher kind: mlp | linear | downproj");
    cmd_tr->add_option("--hidden", tr.hidden, "MLP hidden width");
    cmd_tr->add_option("--bits", tr.bits, "Code length in bits");
    cmd_tr->add_option("--proj-dim", tr.proj_dim, "Down-projection width (0 = d/16)");
    cmd_tr->add_option("--gamma", tr.gamma, "Soft-sign smoothing");
    cmd_tr->add_option("--loss", tr.loss, "Training loss: rank | recon");
    cmd_tr->add_option("--beta", tr.beta, "Ranking loss beta");
    cmd_tr->add_option("--alpha", tr.alpha, "Ranking loss alpha");
    cmd_tr->add_option("--maskout", tr.maskout, "Pruning rate in (0,1)");
    cmd_tr->add_option("--max-top", tr.max_top, "Top-set subsample (-1 = all)");
    cmd_tr->add_option("--max-oth", tr.max_oth, "Non-top subsample (-1 = all)");
    cmd_tr->add_option("--query-subsample", tr.query_subsample,
                       "Queries per iteration (-1 = all)");
    cmd_tr->add_option("--iters", tr.train.num_iters, "Training iterations");
    cmd_tr->add_option("--max-lr", tr.train.max_lr, "Peak learning rate");
    cmd_tr->add_option("--min-lr", tr.train.min_lr, "Final learning rate");
    cmd_tr->add_option("--warmup", tr.train.warmup_iters, "Linear warmup iterations");
    cmd_tr->add_option("--weight-decay", tr.train.weight_decay, "Decoupled weight decay");
    cmd_tr->add_option("--grad-clip", tr.train.grad_clip, "Global gradient-norm clip");
    cmd_tr->add_option("--batch", tr.train.batch, "Sequences per step");
    cmd_tr->add_option("--seed", tr.train.seed, "RNG seed");
    cmd_tr->add_option("--holdout", tr.train.holdout_queries, "Held-out query rows");
    cmd_tr->add_option("--out", tr.out, "Output SPLH checkpoint path");
    cmd_tr->add_option("--report", tr.report, "Output training report path");

    EvalOpts ev;
    CLI::App* cmd_ev = app.add_subcommand("eval", "Measure retrieval IoU and output error");
    cmd_ev->add_option("--dump", ev.dump, "Input SPLQ dump")->required();
    cmd_ev->add_option("--methods", ev.methods,
                       "Methods to run: oracle | lsh | mlp | downproj")
        ->delimiter(',');
    cmd_ev->add_option("--lsh-checkpoint", ev.lsh_checkpoint, "Linear hasher checkpoint");
    cmd_ev->add_option("--mlp-checkpoint", ev.mlp_checkpoint, "MLP hasher checkpoint");
    cmd_ev->add_option("--downproj-checkpoint", ev.downproj_checkpoint,
                       "Down-projection checkpoint");
    cmd_ev->add_option("--budget-rate", ev.budget_rates, "Retrieval budget rates")
        ->delimiter(',');
    cmd_ev->add_option("--seed", ev.seed, "Seed for the synthetic value tensor");
    cmd_ev->add_option("--out", ev.out, "Output report path");
    cmd_ev->add_option("--per-query-csv", ev.per_query_csv, "Optional per-query IoU CSV");
    cmd_ev->add_flag("--frozen", ev.frozen, "Exempt every method from pruning");

    BenchOpts be;
    CLI::App* cmd_be = app.add_subcommand("bench", "Time pack and scan kernels");
    cmd_be->add_option("--sizes", be.sizes, "Code counts to measure")->delimiter(',');
    cmd_be->add_option("--bits", be.bits, "Code length in bits");
    cmd_be->add_option("--trials", be.trials, "Timed trials per size");
    cmd_be->add_option("--warmup", be.warmup, "Warmup trials per size");
    cmd_be->add_option("--seed", be.seed, "RNG seed");
    cmd_be->add_option("--out", be.out, "Optional report path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    std::string command;
    for (int i = 1; i < argc; ++i) {
        if (i > 1) command += ' ';
        command += argv[i];
    }
    const std::string config_hash = hex64(fnv1a(app.config_to_str(true, false)));

    try {
        if (cmd_gen->parsed()) return run_generate(gen, config_hash, command);
        if (cmd_tr->parsed()) return run_train(tr, config_hash, command);
        if (cmd_ev->parsed()) return run_eval(ev, config_hash, command);
        if (cmd_be->parsed()) return run_bench(be, config_hash, command);
        std::fprintf(stderr, "no subcommand selected\n");
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

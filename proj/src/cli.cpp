#include "bus/cli.hpp"

#include "bus/config.hpp"
#include "bus/errors.hpp"
#include "bus/flops.hpp"
#include "bus/gradcheck.hpp"
#include "bus/model.hpp"
#include "bus/objectives.hpp"
#include "bus/schedule.hpp"
#include "bus/summarizer.hpp"
#include "bus/synthdata.hpp"
#include "bus/vocab.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace bus {

namespace {

namespace fs = std::filesystem;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir = "out";
    std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "config file of dotted key=value lines");
    cmd->add_option("--set", args.sets, "override, e.g. --set kpe.alpha=0.5")->take_all();
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "root seed override");
}

Config build_config(const CommonArgs& args) {
    Config cfg = args.config_path.empty() ? Config{} : Config::from_file(args.config_path);
    for (const auto& kv : args.sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
    cfg.validate();
    return cfg;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path.string());
    f << content;
}

void echo_config(const Config& cfg, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    write_file(out_dir / "effective-config.txt", cfg.serialize());
}

std::string csv_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

int cmd_train(const CommonArgs& args) {
    Config cfg = build_config(args);
    const fs::path out_dir = args.out_dir;
    echo_config(cfg, out_dir);
    fs::create_directories(out_dir / "checkpoints");

    BusModel model(cfg, cfg.seed);
    Trainer trainer(model, cfg, cfg.steps);

    std::ofstream metrics(out_dir / "metrics.csv", std::ios::trunc);
    metrics << "step,beta,itc,itm,mlm,prefix,ptm,total,u,s,wall_ms\n";
    const std::uint64_t data_seed = Rng(cfg.seed).split("data").state();
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<SynthSample> batch_o, batch_d;
        for (int i = 0; i < cfg.batch_o; ++i) {
            batch_o.push_back(batch_sample(data_seed, SampleKind::Region, step, i, cfg.image_size));
        }
        for (int i = 0; i < cfg.batch_d; ++i) {
            batch_d.push_back(batch_sample(data_seed, SampleKind::Paired, step, i, cfg.image_size));
        }
        StepReport rep = trainer.train_step(batch_o, batch_d);
        metrics << rep.step << "," << csv_double(rep.beta) << "," << csv_double(rep.losses.itc) << ","
                << csv_double(rep.losses.itm) << "," << csv_double(rep.losses.mlm) << ","
                << csv_double(rep.losses.prefix) << "," << csv_double(rep.losses.ptm) << ","
                << csv_double(rep.losses.total) << "," << rep.u << "," << rep.s << ","
                << csv_double(rep.wall_ms) << "\n";
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            trainer.save_checkpoint((out_dir / "checkpoints" / ("step" + std::to_string(step + 1) + ".bin")).string());
        }
    }
    trainer.save_checkpoint((out_dir / "checkpoints" / "final.bin").string());
    std::cout << "trained " << cfg.steps << " steps, outputs in " << out_dir.string() << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, const std::string& shard) {
    Config cfg = build_config(args);
    const fs::path out_dir = args.out_dir;
    echo_config(cfg, out_dir);

    BusModel model(cfg, cfg.seed);
    if (!checkpoint.empty()) {
        std::vector<std::pair<std::string, Tensor>> sidecar; // optimizer state, unused here
        load_params(checkpoint, model.params(), &sidecar);
    }

    std::vector<SynthSample> paired, region;
    if (!shard.empty()) {
        for (auto& s : read_shard(shard)) {
            (s.has_box ? region : paired).push_back(std::move(s));
        }
    } else {
        const std::uint64_t eval_seed = Rng(cfg.seed).split("eval-data").state();
        for (int i = 0; i < cfg.eval_samples; ++i) {
            paired.push_back(batch_sample(eval_seed, SampleKind::Paired, 0, i, cfg.image_size));
            region.push_back(batch_sample(eval_seed, SampleKind::Region, 0, i, cfg.image_size));
        }
    }
    EvalReport rep = evaluate(model, paired, region, cfg.beta_max, cfg.seed);

    std::ostringstream os;
    os.precision(10);
    os << "itc=" << rep.losses.itc << "\nitm=" << rep.losses.itm << "\nmlm=" << rep.losses.mlm
       << "\nprefix=" << rep.losses.prefix << "\nptm=" << rep.losses.ptm << "\ntotal=" << rep.losses.total
       << "\ntsps_auc=" << rep.tsps_auc << "\n";
    write_file(out_dir / "eval.txt", os.str());
    std::cout << os.str();
    return 0;
}

int cmd_select(const CommonArgs& args, const std::string& checkpoint) {
    Config cfg = build_config(args);
    const fs::path out_dir = args.out_dir;
    echo_config(cfg, out_dir);
    fs::create_directories(out_dir / "masks");

    BusModel model(cfg, cfg.seed);
    if (!checkpoint.empty()) {
        std::vector<std::pair<std::string, Tensor>> sidecar; // optimizer state, unused here
        load_params(checkpoint, model.params(), &sidecar);
    }

    SynthSample sample = generate(cfg.seed, SampleKind::Paired, cfg.image_size);
    NoGradGuard no_grad;
    TextEncoding text = model.text_encoder().encode(sample.caption);
    auto vit = model.vision_encoder().forward(sample.image(), &text, cfg.beta_max, &model.tsps(), cfg);
    PatchSequence seeds = tpa_select(vit.seq, vit.saliency->a_dot, cfg.gamma);

    std::set<int> kpe_set, tpa_set;
    for (int g : vit.seq.grid_indices) {
        if (g >= 0) kpe_set.insert(g);
    }
    for (int g : seeds.grid_indices) {
        if (g >= 0) tpa_set.insert(g);
    }

    std::ostringstream os;
    os.precision(10);
    os << "grid_index,a,p,a_dot,selected_kpe,selected_tpa\n";
    for (int i = 0; i < cfg.n_patches(); ++i) {
        os << i << "," << vit.saliency->a.data()[static_cast<std::size_t>(i)] << ","
           << vit.saliency->p.data()[static_cast<std::size_t>(i)] << ","
           << vit.saliency->a_dot.data()[static_cast<std::size_t>(i)] << ","
           << (kpe_set.count(i) ? 1 : 0) << "," << (tpa_set.count(i) ? 1 : 0) << "\n";
    }
    const fs::path mask_path = out_dir / "masks" / ("sample_" + std::to_string(cfg.seed) + ".csv");
    write_file(mask_path, os.str());
    std::cout << "caption: " << Vocab::instance().detokenize(sample.caption) << "\n"
              << "mask written to " << mask_path.string() << "\n";
    return 0;
}

int cmd_flops(const CommonArgs& args, bool reference_profile, bool sweep) {
    Config cfg = build_config(args);
    if (reference_profile) {
        Config ref = Config::reference_scale();
        // Keep run-level settings; swap in the reference dims.
        ref.seed = cfg.seed;
        cfg = ref;
    }
    const fs::path out_dir = args.out_dir;
    echo_config(cfg, out_dir);

    const int n_img = 1 + cfg.n_patches();
    const int n_txt = cfg.max_text_len;
    const int vocab = reference_profile ? 30522 : Vocab::instance().size();

    FlopsBreakdown bus = model_flops(cfg, n_img, n_txt, vocab);
    FlopsBreakdown base = baseline_flops(cfg, n_img, n_txt, vocab);
    const std::string report = breakdown_report(bus, base);
    write_file(out_dir / "flops.txt", report);
    std::cout << report;

    if (sweep) {
        std::ostringstream csv;
        csv.precision(10);
        csv << "k,alpha,gamma,image_size,u,s,total,baseline_total,ratio\n";
        const int ks[] = {4, 6, 8};
        const double alphas[] = {0.4, 0.7, 0.9};
        const double gammas[] = {0.1, 0.2, 0.4};
        const int sizes[] = {224, 256, 304, 384, 464, 512};
        for (int k : ks)
            for (double a : alphas)
                for (double g : gammas)
                    for (int size : sizes) {
                        Config c = cfg;
                        c.k = k;
                        c.alpha = a;
                        c.gamma = g;
                        c.image_size = size;
                        if (c.k >= c.vit_layers) continue;
                        const int ni = 1 + c.n_patches();
                        FlopsBreakdown m = model_flops(c, ni, n_txt, vocab);
                        FlopsBreakdown b = baseline_flops(c, ni, n_txt, vocab);
                        csv << k << "," << a << "," << g << "," << size << "," << m.u << "," << m.s << ","
                            << m.total << "," << b.total << "," << m.total / b.total << "\n";
                    }
        write_file(out_dir / "flops.csv", csv.str());
    }
    return 0;
}

int cmd_bench(const CommonArgs& args) {
    Config cfg = build_config(args);
    const fs::path out_dir = args.out_dir;
    echo_config(cfg, out_dir);

    BusModel model(cfg, cfg.seed);
    BenchResult res = bench_forward(model, cfg.bench_batch, cfg.bench_warmup, cfg.bench_iters, cfg.seed);
    std::ostringstream os;
    os.precision(8);
    os << "latency_ms=" << res.latency_ms << "\nthroughput=" << res.throughput << "\nbatch=" << res.batch
       << "\niters=" << res.iters << "\nwarmup=" << res.warmup << "\n";
    write_file(out_dir / "bench.txt", os.str());
    std::cout << os.str();
    return 0;
}

int cmd_gen_data(const CommonArgs& args, int count, const std::string& kind_name, const std::string& path) {
    Config cfg = build_config(args);
    SampleKind kind;
    if (kind_name == "paired") kind = SampleKind::Paired;
    else if (kind_name == "region") kind = SampleKind::Region;
    else throw ConfigError("gen-data kind must be paired|region, got '" + kind_name + "'");

    std::vector<SynthSample> samples;
    samples.reserve(static_cast<std::size_t>(count));
    Rng stream = Rng(cfg.seed).split("gen-data");
    for (int i = 0; i < count; ++i) samples.push_back(generate(stream.next_u64(), kind, cfg.image_size));
    fs::create_directories(fs::path(path).parent_path().empty() ? "." : fs::path(path).parent_path());
    write_shard(path, samples);
    std::cout << "wrote " << count << " " << kind_name << " samples to " << path << "\n";
    return 0;
}

int cmd_gradcheck(const CommonArgs& args, int probes) {
    Config cfg = build_config(args);
    auto op_reports = run_op_gradchecks(cfg.seed);
    auto model_reports = run_model_gradcheck(cfg, cfg.seed, probes);

    int failures = 0;
    auto dump = [&failures](const std::vector<GradCheckReport>& reports) {
        for (const auto& r : reports) {
            if (!r.pass) {
                ++failures;
                std::cout << "[FAIL] " << r.name << " max_err=" << r.max_err << " tol=" << r.tolerance << "\n";
            }
        }
    };
    dump(op_reports);
    dump(model_reports);
    std::cout << "gradcheck: " << op_reports.size() << " ops, " << model_reports.size()
              << " parameter tensors, " << failures << " failures\n";
    return failures == 0 ? 0 : 1;
}

} // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"bottom-up patch summarization workbench"};
    app.require_subcommand(1);

    CommonArgs train_args, eval_args, select_args, flops_args, bench_args, gen_args, grad_args;
    std::string eval_checkpoint, eval_shard, select_checkpoint, gen_kind = "paired", gen_path = "shard.bin";
    int gen_count = 100, grad_probes = 3;
    bool flops_reference = false, flops_sweep = false;

    auto* train = app.add_subcommand("train", "run the training schedule");
    add_common(train, train_args);
    auto* eval_cmd = app.add_subcommand("eval", "report losses on held-out synthetic data");
    add_common(eval_cmd, eval_args);
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "weights to load");
    eval_cmd->add_option("--shard", eval_shard, "evaluate this shard instead of generated data");
    auto* select = app.add_subcommand("select", "dump the selection mask for one sample");
    add_common(select, select_args);
    select->add_option("--checkpoint", select_checkpoint, "weights to load");
    auto* flops = app.add_subcommand("flops", "analytical compute breakdown");
    add_common(flops, flops_args);
    flops->add_flag("--reference", flops_reference, "use the reference-scale dims");
    flops->add_flag("--sweep", flops_sweep, "also write a k/alpha/resolution sweep CSV");
    auto* bench = app.add_subcommand("bench", "wall-clock forward benchmark");
    add_common(bench, bench_args);
    auto* gen = app.add_subcommand("gen-data", "write a synthetic shard");
    add_common(gen, gen_args);
    gen->add_option("--count", gen_count, "samples to generate");
    gen->add_option("--kind", gen_kind, "paired|region");
    gen->add_option("--shard", gen_path, "output shard path");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    add_common(gradcheck, grad_args);
    gradcheck->add_option("--probes", grad_probes, "probed entries per parameter tensor");

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(train_args);
        if (eval_cmd->parsed()) return cmd_eval(eval_args, eval_checkpoint, eval_shard);
        if (select->parsed()) return cmd_select(select_args, select_checkpoint);
        if (flops->parsed()) return cmd_flops(flops_args, flops_reference, flops_sweep);
        if (bench->parsed()) return cmd_bench(bench_args);
        if (gen->parsed()) return cmd_gen_data(gen_args, gen_count, gen_kind, gen_path);
        if (gradcheck->parsed()) return cmd_gradcheck(grad_args, grad_probes);
        return 2;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
}

} // namespace bus

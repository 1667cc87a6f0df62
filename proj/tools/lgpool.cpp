// SPDX-License-Identifier: Apache-2.0
//
// lgpool: stage-wise command-line driver.
//
// Exit codes: 0 ok, 1 usage, 2 validation (bad config, missing or malformed
// input), 3 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "lgpool/cli/run_config.hpp"
#include "lgpool/descendant/descendant.hpp"
#include "lgpool/distill/gradcheck_suite.hpp"
#include "lgpool/distill/trainer.hpp"
#include "lgpool/io/dataset.hpp"
#include "lgpool/io/serialize.hpp"
#include "lgpool/pool/finetune.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lgp;
using lgp::cli::RunConfig;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr double kGradTolerance = 1e-4;

class MissingPrerequisite : public ValidationError {
public:
    using ValidationError::ValidationError;
};

void require_file(const std::string& path, const std::string& producer) {
    if (!fs::exists(path))
        throw MissingPrerequisite("missing prerequisite: " + path + (producer.empty() ? "" : " (run `lgpool " + producer + "` first)"));
}

void require_training_profile(const RunConfig& c, const std::string& stage) {
    if (c.profile != "mini")
        throw ValidationError("stage " + stage + " trains models; profile '" + c.profile + "' is accounting only");
}

void ensure_parent(const std::string& path) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

void write_text(const std::string& path, const std::string& text) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError(FormatErrc::io, "cannot write " + path);
    out << text;
    if (!out) throw FormatError(FormatErrc::io, "short write to " + path);
}

std::string file_digest(const std::string& path) { return cli::hex64(io::fnv1a64(io::read_file(path))); }

/// Metadata stored in every checkpoint manifest.
json checkpoint_meta(const RunConfig& c, const std::string& stage, const Normalization& norm) {
    return {{"stage", stage},
            {"run_config", cli::to_json(c)},
            {"config_hash", cli::hex64(cli::config_hash(c))},
            {"seed", c.seed},
            {"normalization", norm}};
}

/// <workdir>/<stage>.manifest.json: config, hash, seed, versions, and
/// digests of every input and output file.
void write_run_manifest(const RunConfig& c, const std::string& stage, const std::string& where,
                        const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
    json m = {{"stage", stage},
              {"config", cli::to_json(c)},
              {"config_hash", cli::hex64(cli::config_hash(c))},
              {"seed", c.seed},
              {"versions",
               {{"lgpool", kVersion}, {"archive_format", Archive::kFormatVersion}, {"dataset_format", io::kDatasetVersion}}}};
    m["inputs"] = json::object();
    for (const auto& f : inputs) m["inputs"][f] = file_digest(f);
    m["outputs"] = json::object();
    for (const auto& f : outputs) m["outputs"][f] = file_digest(f);
    write_text(where, m.dump(2) + "\n");
}

void save(const Archive& a, const std::string& path) {
    ensure_parent(path);
    io::save_archive(a, path);
}

Archive load(const std::string& path, const std::string& producer) {
    require_file(path, producer);
    return io::load_archive(path);
}

Dataset load_data(const std::string& path, const std::string& producer) {
    require_file(path, producer);
    return io::load_raw_dataset(path);
}

void expect_config(const ModelConfig& got, const ModelConfig& want, const std::string& file) {
    if (got != want)
        throw ValidationError(file + " was produced with different model dimensions than the current config");
}

std::string pool_file(const RunConfig& c) {
    return c.artifact(c.assemble_from == "finetuned" ? "pool_finetuned.lgck" : "pool.lgck");
}

std::string pool_producer(const RunConfig& c) { return c.assemble_from == "finetuned" ? "finetune-pool" : "build-pool"; }

double mean_cls(const std::vector<FinetuneStep>& steps, std::size_t begin, std::size_t end) {
    double s = 0;
    for (std::size_t i = begin; i < end; ++i) s += steps[i].cls;
    return end > begin ? s / static_cast<double>(end - begin) : 0.0;
}

// ---- stages ----

int gen_data(const RunConfig& c) {
    require_training_profile(c, "gen-data");
    const auto train = gen_synthetic(c.num_classes, c.train_per_class, c.image_size, c.data_seed, c.channels);
    const auto eval = gen_synthetic(c.num_classes, c.eval_per_class, c.image_size, c.data_seed + 1, c.channels);
    ensure_parent(c.train_data_path());
    ensure_parent(c.eval_data_path());
    io::save_raw_dataset(train, c.train_data_path());
    io::save_raw_dataset(eval, c.eval_data_path());
    write_run_manifest(c, "gen-data", c.artifact("gen-data.manifest.json"), {}, {c.train_data_path(), c.eval_data_path()});
    std::cout << "wrote " << train.size() << " training and " << eval.size() << " evaluation images\n";
    return 0;
}

int train_ancestry(const RunConfig& c) {
    require_training_profile(c, "train-ancestry");
    const auto data = load_data(c.train_data_path(), "gen-data");
    auto model = init_vit<float>(c.ancestry_config(), c.seed);
    Hyper h;
    h.lr = c.ancestry_lr;
    h.weight_decay = c.weight_decay;
    h.epochs = c.ancestry_epochs;
    h.batch_size = c.batch_size;
    h.seed = c.seed;
    const auto trace = train_supervised(model, data, h);
    const double acc = evaluate<float>(model, data);
    auto meta = checkpoint_meta(c, "train-ancestry", data.norm);
    meta["train_accuracy"] = acc;
    const auto out = c.artifact("ancestry.lgck"), csv = c.artifact("ancestry_trace.csv");
    save(io::model_to_archive(model, meta), out);
    std::ostringstream os;
    write_trace_csv(os, trace);
    write_text(csv, os.str());
    write_run_manifest(c, "train-ancestry", c.artifact("train-ancestry.manifest.json"), {c.train_data_path()}, {out, csv});
    std::cout << "ancestry: final L_cls " << trace.back().cls << ", train accuracy " << acc << "\n";
    return 0;
}

int distill_aux(const RunConfig& c, const std::string& which) {
    require_training_profile(c, "distill-aux");
    const auto anc_path = c.artifact("ancestry.lgck");
    const auto anc = io::model_from_archive(load(anc_path, "train-ancestry"));
    expect_config(anc.config, c.ancestry_config(), anc_path);
    const auto data = load_data(c.train_data_path(), "gen-data");
    std::vector<std::string> outputs;
    for (const std::string row : {"low", "high"}) {
        if (which != "both" && which != row) continue;
        const auto cfg = row == "low" ? c.low_config() : c.high_config();
        const auto plan = make_dense_plan(anc.config.depth, cfg.depth, anc.config.dim == cfg.dim);
        Hyper h;
        h.alpha = c.alpha;
        h.tau = c.tau;
        h.lr = c.distill_lr;
        h.weight_decay = c.weight_decay;
        h.epochs = c.distill_epochs;
        h.batch_size = c.distill_batch_size;
        h.seed = c.seed;
        auto res = train_auxiliary(anc, init_vit<float>(cfg, c.seed + (row == "low" ? 1 : 2)), data, plan, h);
        auto meta = checkpoint_meta(c, "distill-aux", data.norm);
        meta["row"] = row;
        auto a = io::model_to_archive(res.aux, meta);
        io::add_transforms(a, res.transforms, plan);
        const auto out = c.artifact("aux_" + row + ".lgck"), csv = c.artifact("distill_" + row + ".csv");
        save(a, out);
        std::ostringstream os;
        write_trace_csv(os, res.trace);
        write_text(csv, os.str());
        outputs.push_back(out);
        outputs.push_back(csv);
        std::cout << "aux " << row << " (d=" << cfg.dim << "): L_dis " << res.trace.front().dis << " -> "
                  << res.trace.back().dis << " over " << h.epochs << " epochs\n";
    }
    write_run_manifest(c, "distill-aux", c.artifact("distill-aux.manifest.json"), {anc_path, c.train_data_path()}, outputs);
    return 0;
}

int build_pool_stage(const RunConfig& c) {
    require_training_profile(c, "build-pool");
    const auto lo_path = c.artifact("aux_low.lgck"), hi_path = c.artifact("aux_high.lgck");
    const auto lo_a = load(lo_path, "distill-aux"), hi_a = load(hi_path, "distill-aux");
    const auto lo = io::model_from_archive(lo_a), hi = io::model_from_archive(hi_a);
    expect_config(lo.config, c.low_config(), lo_path);
    expect_config(hi.config, c.high_config(), hi_path);
    auto pool = build_pool(lo, hi);
    std::vector<std::string> inputs{lo_path, hi_path};
    const auto init = stitch_init_from_string(c.stitch_init);
    if (init == StitchInit::tm) {
        const auto ws = io::learned_block_matrices(lo_a);
        if (ws.empty())
            throw ValidationError("stitch_init tm needs learned transformation matrices, but " + lo_path +
                                  " was distilled at the ancestry width");
        init_stitch_tm(pool, ws);
    } else if (init == StitchInit::ls) {
        const auto data = load_data(c.train_data_path(), "gen-data");
        inputs.push_back(c.train_data_path());
        std::vector<std::size_t> idx(std::min<std::size_t>(c.calib_samples, data.size()));
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const auto report = init_stitch_ls(pool, data.images<float>(idx));
        for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
    } else {
        init_stitch_random(pool, c.seed);
    }
    const auto out = c.artifact("pool.lgck");
    save(io::pool_to_archive(pool, checkpoint_meta(c, "build-pool", Normalization{})), out);
    write_run_manifest(c, "build-pool", c.artifact("build-pool.manifest.json"), inputs, {out});
    std::cout << "pool: " << pool.length() << " instances per row, stitches initialized by " << c.stitch_init << "\n";
    return 0;
}

int finetune_stage(const RunConfig& c) {
    require_training_profile(c, "finetune-pool");
    const auto in = c.artifact("pool.lgck");
    auto pool = io::pool_from_archive(load(in, "build-pool"));
    expect_config(pool.low_config, c.low_config(), in);
    expect_config(pool.high_config, c.high_config(), in);
    const auto data = load_data(c.train_data_path(), "gen-data");
    std::vector<std::string> inputs{in, c.train_data_path()};
    std::optional<VitModel<float>> teacher;
    if (c.teacher) {
        const auto anc_path = c.artifact("ancestry.lgck");
        teacher = io::model_from_archive(load(anc_path, "train-ancestry"));
        inputs.push_back(anc_path);
    }
    FinetuneOptions o;
    o.epochs = c.finetune_epochs;
    o.batch_size = c.batch_size;
    o.lr = c.finetune_lr;
    o.tau = c.tau;
    o.seed = c.seed;
    o.mode = path_mode_from_string(c.mode);
    o.freeze_instances = c.freeze_instances;
    const auto steps = finetune_pool(pool, data, o, teacher ? &*teacher : nullptr);
    const auto out = c.artifact("pool_finetuned.lgck"), csv = c.artifact("finetune.csv");
    save(io::pool_to_archive(pool, checkpoint_meta(c, "finetune-pool", data.norm)), out);
    std::ostringstream os;
    write_finetune_csv(os, steps);
    write_text(csv, os.str());
    write_run_manifest(c, "finetune-pool", c.artifact("finetune-pool.manifest.json"), inputs, {out, csv});
    const std::size_t w = std::min<std::size_t>(50, steps.size() / 2);
    std::cout << "finetune: " << steps.size() << " steps";
    if (w > 0)
        std::cout << ", mean L_cls first " << w << " " << mean_cls(steps, 0, w) << ", last " << w << " "
                  << mean_cls(steps, steps.size() - w, steps.size());
    std::cout << "\n";
    return 0;
}

int assemble_stage(const RunConfig& c) {
    const auto in = pool_file(c);
    const auto pool = io::pool_from_archive(load(in, pool_producer(c)));
    const auto path = Path::parse(c.path);
    const auto d = assemble(pool, path);
    const auto cost = account(pool_config(pool), path);
    const auto out = c.artifact("descendant_" + path.id() + ".lgck");
    save(io::descendant_to_archive(d, checkpoint_meta(c, "assemble", Normalization{})), out);
    write_run_manifest(c, "assemble", c.artifact("assemble.manifest.json"), {in}, {out});
    std::cout << "descendant " << path.id() << ": depth " << d.depth() << ", " << cost.params << " params, "
              << cost.flops << " FLOPs\n";
    return 0;
}

int eval_stage(const RunConfig& c, bool all_paths) {
    const auto data = load_data(c.eval_data_path(), "gen-data");
    std::vector<std::string> inputs{c.eval_data_path()};
    std::ostringstream os;
    os << "path_id,k,m,params,flops,accuracy\n";
    os.precision(9);
    auto row = [&](const Path& p, const Cost& cost, double acc) {
        os << p.id() << ',' << p.k << ',' << p.m << ',' << cost.params << ',' << cost.flops << ',' << acc << '\n';
        std::cout << p.id() << ": accuracy " << acc << "\n";
    };
    if (all_paths) {
        const auto in = pool_file(c);
        const auto pool = io::pool_from_archive(load(in, pool_producer(c)));
        inputs.push_back(in);
        for (const auto& p : enumerate_paths(pool, path_mode_from_string(c.mode)))
            row(p, account(pool_config(pool), p), evaluate<float>(assemble(pool, p), data));
    } else {
        const auto path = Path::parse(c.path);
        const auto in = c.artifact("descendant_" + path.id() + ".lgck");
        const auto a = load(in, "assemble");
        const auto d = io::descendant_from_archive(a);
        if (a.manifest.contains("normalization") &&
            a.manifest.at("normalization").get<Normalization>() != data.norm)
            throw ValidationError(in + " records a different pixel normalization than the evaluation data");
        inputs.push_back(in);
        row(d.path, account(PoolConfig{d.low_config, d.high_config}, d.path), evaluate<float>(d, data));
    }
    const auto csv = c.artifact("eval.csv");
    write_text(csv, os.str());
    write_run_manifest(c, "eval", c.artifact("eval.manifest.json"), inputs, {csv});
    return 0;
}

void emit_csv(const RunConfig& c, const std::string& stage, const std::string& out, const std::string& text) {
    if (out.empty()) {
        std::cout << text;
        return;
    }
    write_text(out, text);
    write_run_manifest(c, stage, out + ".manifest.json", {}, {out});
}

int account_stage(const RunConfig& c, const std::string& out) {
    std::ostringstream os;
    write_account_csv(os, c.pool_config(), enumerate_paths(c.depth(), path_mode_from_string(c.mode)));
    emit_csv(c, "account", out, os.str());
    return 0;
}

int enumerate_stage(const RunConfig& c, const std::string& out) {
    std::ostringstream os;
    os << "path_id,k,m,depth,uses_stitch\n";
    const auto l = c.depth();
    for (const auto& p : enumerate_paths(l, path_mode_from_string(c.mode)))
        os << p.id() << ',' << p.k << ',' << p.m << ',' << p.depth(l) << ',' << (p.uses_stitch(l) ? 1 : 0) << '\n';
    emit_csv(c, "enumerate", out, os.str());
    return 0;
}

int plan_stage(const RunConfig& c, std::optional<double> max_params, std::optional<double> max_flops,
               const std::string& out) {
    const auto plan = plan_under_budget(c.pool_config(), Budget{max_params, max_flops}, path_mode_from_string(c.mode));
    if (plan.feasible.empty() && plan.smallest)
        std::cerr << "no path fits the budget; the smallest path needs " << plan.smallest->params << " params and "
                  << plan.smallest->flops << " FLOPs\n";
    std::ostringstream os;
    write_plan_csv(os, plan);
    emit_csv(c, "plan", out, os.str());
    return 0;
}

int gradcheck_stage(const RunConfig& c) {
    require_training_profile(c, "gradcheck");
    const auto results = check::run_suite(c.ancestry_config(), c.low_config(), c.alpha, c.tau, 20, c.seed);
    bool ok = true;
    std::cout << "check,max_rel_error,coordinates,status\n";
    for (const auto& r : results) {
        const bool pass = r.max_rel_error < kGradTolerance;
        ok = ok && pass;
        std::cout << r.name << ',' << r.max_rel_error << ',' << r.coordinates << ',' << (pass ? "PASS" : "FAIL") << "\n";
    }
    return ok ? 0 : 3;
}

std::string dashed(std::string s) {
    for (auto& ch : s)
        if (ch == '_') ch = '-';
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lgpool: learngene pool pipeline (distill, build, finetune, assemble, evaluate, account)"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_file;
    bool quiet = false;
    app.add_option("--config", config_file, "YAML file of flat config keys");
    app.add_flag("--quiet,-q", quiet, "do not echo the resolved config");

    // Every config key is also a flag; flags win over the file.
    std::map<std::string, std::string> text_flags;
    std::map<std::string, bool> bool_flags;
    std::map<std::string, CLI::Option*> key_options;
    for (const auto& k : cli::config_keys()) {
        const std::string flag = "--" + dashed(k.name);
        if (std::holds_alternative<bool RunConfig::*>(k.field))
            key_options[k.name] = app.add_flag(flag + ",!--no-" + dashed(k.name), bool_flags[k.name], k.help);
        else
            key_options[k.name] = app.add_option(flag, text_flags[k.name], k.help);
        key_options[k.name]->group("Config keys");
    }

    auto* s_gen = app.add_subcommand("gen-data", "write synthetic training and evaluation sets");
    auto* s_anc = app.add_subcommand("train-ancestry", "train the mini ancestry model");
    auto* s_dis = app.add_subcommand("distill-aux", "distill the low- and high-row auxiliary models");
    std::string row = "both";
    s_dis->add_option("--row", row, "low | high | both")->check(CLI::IsMember({"low", "high", "both"}));
    auto* s_build = app.add_subcommand("build-pool", "build the learngene pool and initialize stitches");
    auto* s_ft = app.add_subcommand("finetune-pool", "finetune the pool along randomly sampled paths");
    auto* s_asm = app.add_subcommand("assemble", "assemble the descendant for `path`");
    auto* s_eval = app.add_subcommand("eval", "evaluate a descendant (or every path with --all)");
    bool all_paths = false;
    s_eval->add_flag("--all", all_paths, "evaluate every path of the pool in `mode`");
    auto* s_acc = app.add_subcommand("account", "parameter and FLOP accounting per path");
    auto* s_enum = app.add_subcommand("enumerate", "list the path space");
    auto* s_plan = app.add_subcommand("plan", "rank paths under a parameter/FLOP budget");
    std::optional<double> max_params, max_flops;
    s_plan->add_option("--max-params", max_params, "parameter budget");
    s_plan->add_option("--max-flops", max_flops, "FLOP budget (1 MAC = 1 FLOP)");
    auto* s_grad = app.add_subcommand("gradcheck", "finite-difference checks on every op and the full objective");
    std::string out;
    for (auto* s : {s_acc, s_enum, s_plan}) s->add_option("--out", out, "write the CSV here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        std::vector<std::pair<std::string, std::string>> flags;
        for (const auto& k : cli::config_keys()) {
            if (key_options[k.name]->count() == 0) continue;
            if (std::holds_alternative<bool RunConfig::*>(k.field))
                flags.emplace_back(k.name, bool_flags[k.name] ? "true" : "false");
            else
                flags.emplace_back(k.name, text_flags[k.name]);
        }
        const auto cfg = cli::resolve_config(config_file.empty() ? std::nullopt : std::optional(config_file), flags);
        if (!quiet) {
            std::istringstream lines(cli::echo(cfg));
            for (std::string line; std::getline(lines, line);) std::cout << "# " << line << "\n";
            std::cout << "# config_hash: " << cli::hex64(cli::config_hash(cfg)) << "\n";
        }

        if (s_gen->parsed()) return gen_data(cfg);
        if (s_anc->parsed()) return train_ancestry(cfg);
        if (s_dis->parsed()) return distill_aux(cfg, row);
        if (s_build->parsed()) return build_pool_stage(cfg);
        if (s_ft->parsed()) return finetune_stage(cfg);
        if (s_asm->parsed()) return assemble_stage(cfg);
        if (s_eval->parsed()) return eval_stage(cfg, all_paths);
        if (s_acc->parsed()) return account_stage(cfg, out);
        if (s_enum->parsed()) return enumerate_stage(cfg, out);
        if (s_plan->parsed()) return plan_stage(cfg, max_params, max_flops, out);
        if (s_grad->parsed()) return gradcheck_stage(cfg);
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

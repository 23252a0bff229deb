// pretext: generate / stats / pretrain / finetune / eval driver.
// Exit codes: 0 success, 2 validation or config error, 3 pipeline error.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pretext/config.hpp"
#include "pretext/data.hpp"
#include "pretext/errors.hpp"
#include "pretext/eval.hpp"
#include "pretext/finetune.hpp"
#include "pretext/generator.hpp"
#include "pretext/pretrain.hpp"
#include "pretext/rng.hpp"
#include "pretext/scorer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pretext;

namespace {

int g_log_level = 1;  // 0 debug, 1 info, 2 warn, 3 error

void log_at(int level, const char* tag, const std::string& msg) {
    if (level >= g_log_level) std::cerr << "[" << tag << "] " << msg << "\n";
}
void log_debug(const std::string& msg) { log_at(0, "debug", msg); }
void log_info(const std::string& msg) { log_at(1, "info", msg); }
void log_error(const std::string& msg) { log_at(3, "error", msg); }

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) throw ValidationError(what + " '" + path + "' does not exist");
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string file_hash(const std::string& path) {
    const std::string bytes = read_file(path);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
    return buf;
}

// Provenance record written next to each output artifact: the subcommand, the
// resolved config + seed, and content hashes of every input file.
void write_run_manifest(const std::string& out_path, const std::string& command,
                        const RunConfig& cfg, const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs) {
    json j;
    j["command"] = command;
    j["seed"] = cfg.seed;
    j["config"] = run_config_to_json(cfg);
    j["inputs"] = json::array();
    for (const auto& p : inputs) j["inputs"].push_back({{"path", p}, {"fnv1a", file_hash(p)}});
    j["outputs"] = outputs;
    const std::string path = out_path + ".run.json";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << j.dump(2) << "\n";
    log_debug("run manifest " + path);
}

struct GlobalArgs {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string out_path;
    std::string log_level = "info";
};

RunConfig resolve_config(const GlobalArgs& g) {
    RunConfig cfg;
    if (!g.config_path.empty()) {
        require_file(g.config_path, "config file");
        cfg = load_run_config(g.config_path);
    }
    if (g.seed_set) {
        cfg.seed = g.seed;
        cfg.pretrain.seed = g.seed;
        cfg.finetune.seed = g.seed;
    }
    return cfg;
}

std::unique_ptr<ScorerBackend> make_backend(const RunConfig& cfg) {
    if (cfg.backend == "mock")
        return std::make_unique<MockBackend>(cfg.backend_dim, cfg.backend_seed);
    if (cfg.backend == "scripted") {
        require_file(cfg.backend_script, "backend script");
        require_file(cfg.ontology_path, "ontology file");
        AttributeOntology ontology = load_ontology(cfg.ontology_path);
        auto truth = ScriptedBackend::load_script(cfg.backend_script);
        return std::make_unique<ScriptedBackend>(std::move(ontology), std::move(truth),
                                                 cfg.backend_dim, cfg.backend_seed);
    }
    if (cfg.backend == "plugin") return std::make_unique<PluginBackend>(cfg.backend_command, cfg.backend_dim);
    throw ConfigError("unknown backend '" + cfg.backend + "'");
}

bool pnm_file(const fs::path& p) {
    const std::string ext = p.extension().string();
    return ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

int run_generate(const GlobalArgs& g, const std::string& images_dir,
                 const std::string& in_manifest, RunConfig cfg) {
    if (g.out_path.empty()) throw ValidationError("generate requires --out MANIFEST");
    if (images_dir.empty() == in_manifest.empty())
        throw ValidationError("generate requires exactly one of --images DIR or --in MANIFEST");

    require_file(cfg.ontology_path, "ontology file");
    require_file(cfg.templates_path, "templates file");
    cfg.validate();

    AttributeOntology ontology = load_ontology(cfg.ontology_path);
    std::vector<CaptionTemplate> templates = load_templates(cfg.templates_path);
    std::unique_ptr<ScorerBackend> backend = make_backend(cfg);

    std::vector<std::string> inputs = {cfg.ontology_path, cfg.templates_path};
    std::vector<ImageRecord> images;
    DatasetManifest source;
    if (!images_dir.empty()) {
        require_file(images_dir, "images directory");
        std::vector<fs::path> paths;
        for (const auto& entry : fs::directory_iterator(images_dir))
            if (entry.is_regular_file() && pnm_file(entry.path())) paths.push_back(entry.path());
        std::sort(paths.begin(), paths.end());
        if (paths.empty()) throw ValidationError("no .pgm/.ppm/.pnm files in '" + images_dir + "'");
        for (const auto& p : paths) {
            images.push_back(ImageRecord{p.filename().string(), read_file(p.string()), {}});
            inputs.push_back(p.string());
        }
    } else {
        require_file(in_manifest, "input manifest");
        inputs.push_back(in_manifest);
        source = load_manifest(in_manifest);
        for (const auto& rec : source.records) {
            ImageRecord img;
            img.id = rec.image_id;
            img.features = rec.features;
            if (img.features.empty()) {
                require_file(rec.image_ref, "image file");
                img.bytes = read_file(rec.image_ref);
            }
            images.push_back(std::move(img));
        }
    }

    log_info("generating captions for " + std::to_string(images.size()) + " images (backend " +
             backend->name() + ", workers " + std::to_string(cfg.workers) + ")");
    DatasetManifest out =
        generate_manifest(images, ontology, templates, *backend, cfg.generate, cfg.seed, cfg.workers);

    if (!in_manifest.empty()) {
        // Caption generation appends to the source manifest: labels, splits and
        // file references carry through untouched.
        std::map<std::string, const PersonRecord*> by_id;
        for (const auto& rec : source.records) by_id[rec.image_id] = &rec;
        for (auto& rec : out.records) {
            const PersonRecord& src = *by_id.at(rec.image_id);
            rec.identity = src.identity;
            rec.split = src.split;
            rec.image_ref = src.image_ref;
        }
    }

    save_manifest(out, g.out_path);
    write_run_manifest(g.out_path, "generate", cfg, inputs, {g.out_path});
    log_info("wrote " + std::to_string(out.size()) + " captions to " + g.out_path);
    return 0;
}

int run_stats(const GlobalArgs& g, const std::string& manifest_path, const RunConfig& cfg) {
    require_file(manifest_path, "manifest");
    DatasetManifest manifest = load_manifest(manifest_path);
    CorpusStats stats = corpus_stats(manifest);

    std::ostringstream table;
    table << "captions            " << stats.caption_count << "\n";
    table << "rows with fills     " << stats.rows_with_fills << "\n";
    table << "rows without fills  " << stats.unknown_fills << "\n";
    table << "category             count  frequency\n";
    for (const auto& [category, count] : stats.category_counts) {
        char line[96];
        std::snprintf(line, sizeof(line), "%-20s %5zu  %.4f\n", category.c_str(), count,
                      stats.category_frequencies.at(category));
        table << line;
    }
    std::cout << table.str();

    if (!g.out_path.empty()) {
        json j;
        j["caption_count"] = stats.caption_count;
        j["rows_with_fills"] = stats.rows_with_fills;
        j["unknown_fills"] = stats.unknown_fills;
        j["category_counts"] = stats.category_counts;
        j["category_frequencies"] = stats.category_frequencies;
        std::ofstream out(g.out_path, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot write '" + g.out_path + "'");
        out << j.dump(2) << "\n";
        write_run_manifest(g.out_path, "stats", cfg, {manifest_path}, {g.out_path});
    }
    return 0;
}

int run_pretrain(const GlobalArgs& g, const std::string& manifest_path, RunConfig cfg) {
    if (g.out_path.empty()) throw ValidationError("pretrain requires --out CKPT");
    require_file(manifest_path, "manifest");
    cfg.validate();

    DatasetManifest manifest = load_manifest(manifest_path);
    log_info("pretraining on " + std::to_string(manifest.size()) + " records (beta " +
             std::to_string(cfg.pretrain.beta) + ", seed " + std::to_string(cfg.pretrain.seed) + ")");
    Checkpoint ckpt = pretrain_loop(manifest, cfg.pretrain, nullptr,
                                    [](int epoch, const LossReport& mean) {
                                        std::ostringstream ss;
                                        ss << "epoch " << epoch << " l_con " << mean.l_con
                                           << " l_mlm " << mean.l_mlm << " l_pre " << mean.l_pre;
                                        log_info(ss.str());
                                    });
    save_checkpoint(ckpt, g.out_path);
    write_run_manifest(g.out_path, "pretrain", cfg, {manifest_path}, {g.out_path});
    log_info("wrote checkpoint " + g.out_path);
    return 0;
}

int run_finetune(const GlobalArgs& g, const std::string& manifest_path,
                 const std::string& init_path, RunConfig cfg) {
    if (g.out_path.empty()) throw ValidationError("finetune requires --out CKPT");
    require_file(manifest_path, "manifest");
    require_file(init_path, "initial checkpoint");
    cfg.validate();

    DatasetManifest manifest = load_manifest(manifest_path);
    Checkpoint init = load_checkpoint(init_path);
    log_info("fine-tuning on " + std::to_string(manifest.size()) + " records (gamma " +
             std::to_string(cfg.finetune.gamma) + ", seed " + std::to_string(cfg.finetune.seed) +
             ")");
    Checkpoint ckpt = finetune_loop(manifest, init, cfg.finetune, nullptr,
                                    [](int epoch, const FinetuneLossReport& mean) {
                                        std::ostringstream ss;
                                        ss << "epoch " << epoch << " l_id " << mean.l_id << " l_rk "
                                           << mean.l_rk << " l_pgu " << mean.l_pgu << " l_ft "
                                           << mean.l_ft;
                                        log_info(ss.str());
                                    });
    save_checkpoint(ckpt, g.out_path);
    write_run_manifest(g.out_path, "finetune", cfg, {manifest_path, init_path}, {g.out_path});
    log_info("wrote checkpoint " + g.out_path);
    return 0;
}

int run_eval(const GlobalArgs& g, const std::string& ckpt_path, const std::string& manifest_path,
             const std::string& manifest_b_path, bool cross_domain, const RunConfig& cfg) {
    require_file(ckpt_path, "checkpoint");
    if (cross_domain && manifest_b_path.empty())
        throw ValidationError("--cross-domain requires --manifest-b");
    if (!cross_domain && manifest_path.empty())
        throw ValidationError("eval requires --manifest (or --manifest-b with --cross-domain)");

    Checkpoint ckpt = load_checkpoint(ckpt_path);
    const std::string eval_path = cross_domain ? manifest_b_path : manifest_path;
    require_file(eval_path, "manifest");
    DatasetManifest manifest = load_manifest(eval_path);

    RankKReport report =
        cross_domain ? cross_domain_evaluate(ckpt, manifest) : evaluate(ckpt, manifest);
    std::cout << report_table(report);

    if (!g.out_path.empty()) {
        std::ofstream out(g.out_path, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot write '" + g.out_path + "'");
        out << report_to_json(report).dump(2) << "\n";
        write_run_manifest(g.out_path, cross_domain ? "eval --cross-domain" : "eval", cfg,
                           {ckpt_path, eval_path}, {g.out_path});
    }
    return 0;
}

int gate_value(const std::string& flag, int value, const std::string& name) {
    if (value != 0 && value != 1) throw ValidationError(name + " must be 0 or 1");
    (void)flag;
    return value;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pseudo-caption generation and cross-modal training pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs g;
    app.add_option("--config", g.config_path, "run configuration JSON");
    auto* seed_opt = app.add_option("--seed", g.seed, "global RNG seed");
    app.add_option("--out", g.out_path, "output artifact path");
    app.add_option("--log-level", g.log_level, "debug|info|warn|error")
        ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

    std::string images_dir, in_manifest, manifest_path, init_path, ckpt_path, manifest_b_path;
    std::string ontology_path, templates_path, backend_name, backend_script;
    std::vector<std::string> backend_command;
    double threshold = -1.0, scale = -1.0, synonym_rate = -1.0, alpha = -1.0;
    int workers = 0, beta = -1, gamma = -1, epochs = -1;
    int batch_size = -1;
    bool cross_domain = false;

    CLI::App* cmd_generate = app.add_subcommand("generate", "caption an image set");
    cmd_generate->add_option("--images", images_dir, "directory of .pgm/.ppm/.pnm files");
    cmd_generate->add_option("--in", in_manifest, "manifest of records to caption");
    cmd_generate->add_option("--ontology", ontology_path, "attribute ontology JSON");
    cmd_generate->add_option("--templates", templates_path, "template TSV");
    cmd_generate->add_option("--backend", backend_name, "mock|scripted|plugin");
    cmd_generate->add_option("--script", backend_script, "scripted backend ground truth JSON");
    cmd_generate->add_option("--command", backend_command, "plugin backend argv");
    cmd_generate->add_option("--threshold", threshold, "optional-attribute gate");
    cmd_generate->add_option("--scale", scale, "softmax logit scale");
    cmd_generate->add_option("--synonym-rate", synonym_rate, "per-slot synonym probability");
    cmd_generate->add_option("--workers", workers, "parallel workers");

    CLI::App* cmd_stats = app.add_subcommand("stats", "attribute statistics of a manifest");
    cmd_stats->add_option("--manifest", manifest_path, "caption manifest")->required();

    CLI::App* cmd_pretrain = app.add_subcommand("pretrain", "contrastive + MLM pre-training");
    cmd_pretrain->add_option("--manifest", manifest_path, "caption manifest")->required();
    cmd_pretrain->add_option("--beta", beta, "MLM gate (0 or 1)");
    cmd_pretrain->add_option("--epochs", epochs, "training epochs");
    cmd_pretrain->add_option("--batch-size", batch_size, "batch size");

    CLI::App* cmd_finetune = app.add_subcommand("finetune", "identity + ranking fine-tuning");
    cmd_finetune->add_option("--manifest", manifest_path, "labeled caption manifest")->required();
    cmd_finetune->add_option("--init", init_path, "pre-trained checkpoint")->required();
    cmd_finetune->add_option("--gamma", gamma, "granularity-unification gate (0 or 1)");
    cmd_finetune->add_option("--alpha", alpha, "ranking margin");
    cmd_finetune->add_option("--epochs", epochs, "training epochs");
    cmd_finetune->add_option("--batch-size", batch_size, "batch size");

    CLI::App* cmd_eval = app.add_subcommand("eval", "rank-k retrieval evaluation");
    cmd_eval->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    cmd_eval->add_option("--manifest", manifest_path, "query/gallery manifest");
    cmd_eval->add_option("--manifest-b", manifest_b_path, "manifest from another domain");
    cmd_eval->add_flag("--cross-domain", cross_domain, "evaluate on --manifest-b");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "[error] " << e.what() << "\n";
        return 2;
    }

    static const std::map<std::string, int> kLevels{
        {"debug", 0}, {"info", 1}, {"warn", 2}, {"error", 3}};
    g_log_level = kLevels.at(g.log_level);
    g.seed_set = seed_opt->count() > 0;

    try {
        RunConfig cfg = resolve_config(g);
        if (!ontology_path.empty()) cfg.ontology_path = ontology_path;
        if (!templates_path.empty()) cfg.templates_path = templates_path;
        if (!backend_name.empty()) cfg.backend = backend_name;
        if (!backend_script.empty()) cfg.backend_script = backend_script;
        if (!backend_command.empty()) cfg.backend_command = backend_command;
        if (threshold >= 0) cfg.generate.threshold = threshold;
        if (scale >= 0) cfg.generate.scale = scale;
        if (synonym_rate >= 0) cfg.generate.synonym_rate = synonym_rate;
        if (workers > 0) cfg.workers = workers;
        if (beta >= 0 || cmd_pretrain->count("--beta"))
            cfg.pretrain.beta = gate_value("--beta", beta, "beta");
        if (gamma >= 0 || cmd_finetune->count("--gamma"))
            cfg.finetune.gamma = gate_value("--gamma", gamma, "gamma");
        if (alpha >= 0) cfg.finetune.alpha = alpha;
        if (epochs > 0 && cmd_pretrain->parsed()) cfg.pretrain.epochs = epochs;
        if (epochs > 0 && cmd_finetune->parsed()) cfg.finetune.epochs = epochs;
        if (batch_size > 0 && cmd_pretrain->parsed())
            cfg.pretrain.batch_size = static_cast<size_t>(batch_size);
        if (batch_size > 0 && cmd_finetune->parsed())
            cfg.finetune.batch_size = static_cast<size_t>(batch_size);

        if (cmd_generate->parsed()) return run_generate(g, images_dir, in_manifest, std::move(cfg));
        if (cmd_stats->parsed()) return run_stats(g, manifest_path, cfg);
        if (cmd_pretrain->parsed()) return run_pretrain(g, manifest_path, std::move(cfg));
        if (cmd_finetune->parsed()) return run_finetune(g, manifest_path, init_path, std::move(cfg));
        if (cmd_eval->parsed())
            return run_eval(g, ckpt_path, manifest_path, manifest_b_path, cross_domain, cfg);
        throw ValidationError("no subcommand given");
    } catch (const ValidationError& e) {
        log_error(e.what());
        return 2;
    } catch (const ConfigError& e) {
        log_error(e.what());
        return 2;
    } catch (const ParseError& e) {
        log_error(e.what());
        return 2;
    } catch (const std::exception& e) {
        log_error(e.what());
        return 3;
    }
}

#include "protopart/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "protopart/checkpoint.hpp"
#include "protopart/data.hpp"
#include "protopart/errors.hpp"
#include "protopart/evaluation.hpp"
#include "protopart/review_service.hpp"
#include "protopart/trainer.hpp"

namespace fs = std::filesystem;

namespace protopart {

namespace {

struct TrainArgs {
    std::string config, data, mode, masks, valid_set, out, mask_polarity;
    std::optional<unsigned long long> seed;
    std::optional<int> epochs, batch_size;
    bool resume = false;
};

struct EvalArgs {
    std::string ckpt, data, out;
};

struct ExplainArgs {
    std::string ckpt, image, out, render;
    int top = 3;
};

struct AuditArgs {
    std::string ckpt, data, masks, out, mask_polarity = "lesion-white";
    int boundary = 8;
};

struct ServeArgs {
    std::string ckpt, run_dir, host = "127.0.0.1", ui;
    int port = 8741;
    bool allow_partial = false;
};

struct SynthArgs {
    SynthConfig config;
    std::string out;
};

void write_json_file(const std::string& path, const nlohmann::json& j) { atomic_write(path, j.dump(2) + "\n"); }

int cmd_train(const TrainArgs& a, std::ostream& out) {
    RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    if (!a.mode.empty()) cfg.train.mode = parse_mode(a.mode);
    if (a.seed) cfg.train.seed = *a.seed;
    if (a.epochs) cfg.train.epochs = *a.epochs;
    if (a.batch_size) cfg.train.batch_size = *a.batch_size;
    if (!a.mask_polarity.empty()) cfg.mask_polarity = parse_mask_polarity(a.mask_polarity);
    cfg.validate();

    if (cfg.train.mode == TrainMode::lp_lm && a.masks.empty()) {
        throw ConfigError("mode lp+lm requires lesion masks: pass --masks DIR");
    }
    if (cfg.train.mode == TrainMode::lp_lr && a.valid_set.empty()) {
        throw ConfigError("mode lp+lr requires a valid prototype set: pass --valid-set FILE");
    }
    const auto masks = a.masks.empty() ? std::nullopt : std::optional<std::string>(a.masks);
    const auto valid = a.valid_set.empty() ? std::nullopt : std::optional<std::string>(a.valid_set);
    TrainData data = load_training_data(a.data, cfg, masks, valid);
    if (!data.valid.empty()) {
        std::map<int, int> per;
        for (const auto& v : data.valid) ++per[v.entry.class_id];
        out << "valid set:";
        for (const auto& [k, n] : per) out << " " << class_name(k) << "=" << n;
        out << "\n";
    }

    Trainer trainer(cfg, std::move(data), a.out);
    const TrainSummary s = trainer.train(a.resume);
    out << "trained " << s.steps << " steps; projections at";
    for (int e : s.projection_epochs) out << " " << e;
    out << "; best epoch " << s.best_epoch << " (selection BA " << s.best_ba << ")\n";
    if (s.initial_valid_distance && s.final_valid_distance) {
        out << "valid-patch distance " << *s.initial_valid_distance << " -> " << *s.final_valid_distance << "\n";
    }
    out << "run directory: " << a.out << "\n";
    return 0;
}

int cmd_evaluate(const EvalArgs& a, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    const Manifest manifest = load_manifest(a.data, ckpt.model.config.num_classes);
    const Evaluation ev = evaluate(ckpt.model, manifest, ckpt.id);
    nlohmann::json j = ev.report;
    auto& preds = j["predictions"] = nlohmann::json::array();
    for (const auto& p : ev.predictions) {
        preds.push_back({{"image", p.image_id}, {"label", p.label}, {"predicted", p.predicted}, {"scores", p.scores}});
    }
    write_json_file(a.out, j);
    out << format_report(ev.report);
    return 0;
}

int cmd_explain(const ExplainArgs& a, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    const InputImage img = load_image(a.image);
    const Explanation e = explain(ckpt.model, img, a.top);
    nlohmann::json j = e;
    j["checkpoint_id"] = ckpt.id;
    write_json_file(a.out, j);
    if (!a.render.empty()) write_png(a.render, render_explanation(ckpt.model, img, e));
    out << "predicted " << class_name(e.predicted) << "\n";
    for (const auto& x : e.entries) {
        out << "  prototype " << x.prototype << " (" << class_name(x.class_id) << ") score " << x.score << " points "
            << x.points << "\n";
    }
    return 0;
}

int cmd_audit(const AuditArgs& a, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(a.ckpt);
    const Manifest manifest = load_manifest(a.data, ckpt.model.config.num_classes);
    const MaskPolarity polarity = parse_mask_polarity(a.mask_polarity);
    const int size = ckpt.model.config.input_size;
    std::map<std::string, std::optional<LesionMask>> masks;
    auto mask_for = [&](const std::string& id) -> const LesionMask* {
        auto it = masks.find(id);
        if (it == masks.end()) {
            std::optional<std::string> path;
            if (!a.masks.empty()) {
                const auto p = fs::path(a.masks) / (id + ".png");
                if (fs::exists(p)) path = p.string();
            } else if (const ManifestRow* row = manifest.find(id); row && row->mask_path) {
                path = row->mask_path;
            }
            std::optional<LesionMask> m;
            if (path) m = load_mask(*path, size, size, polarity);
            it = masks.emplace(id, std::move(m)).first;
        }
        return it->second ? &*it->second : nullptr;
    };
    const PrototypeAudit audit = audit_prototypes(ckpt.model, mask_for, a.boundary);
    nlohmann::json j = audit;
    j["checkpoint_id"] = ckpt.id;
    write_json_file(a.out, j);
    out << "inside-lesion fraction: " << audit.fraction_inside << "\n";
    for (std::size_t k = 0; k < audit.fraction_inside_per_class.size(); ++k) {
        out << "  " << class_name(static_cast<int>(k)) << ": " << audit.fraction_inside_per_class[k] << "\n";
    }
    return 0;
}

int cmd_serve(const ServeArgs& a, std::ostream& out) {
    Checkpoint ckpt = load_checkpoint(a.ckpt);
    const std::string run_dir = a.run_dir.empty() ? fs::path(a.ckpt).parent_path().string() : a.run_dir;
    const std::string session_dir = (fs::path(run_dir.empty() ? "." : run_dir) / ("review-" + ckpt.id)).string();
    ReviewService service(std::move(ckpt.model), ckpt.id, session_dir, a.allow_partial);
    out << "review session " << service.session_path() << "\n";
    out << "listening on http://" << a.host << ":" << a.port << "\n" << std::flush;
    run_review_server(service, a.host, a.port,
                      a.ui.empty() ? std::nullopt : std::optional<std::string>(a.ui));
    return 0;
}

int cmd_synth(const SynthArgs& a, std::ostream& out) {
    const auto samples = generate_synthetic(a.config);
    const Manifest m = write_synthetic(samples, a.out);
    int confounded = 0;
    for (const auto& s : samples) confounded += s.confound ? 1 : 0;
    out << "wrote " << m.rows.size() << " images (" << a.config.n_per_class << " per class, " << confounded
        << " with a corner artifact) to " << a.out << "\n";
    return 0;
}

void report_items(std::ostream& err, const std::vector<std::string>& items) {
    for (const auto& i : items) err << "  - " << i << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Prototypical-part classifier: train, evaluate, explain, audit, review"};
    app.name("protopart");
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Run the warm-up / joint / projection schedule");
    train->add_option("--config", ta.config, "JSON config (flags override it)");
    train->add_option("--data", ta.data, "manifest.csv (image,label,mask[,split])")->required();
    train->add_option("--mode", ta.mode, "lp | lp+lm | lp+lr");
    train->add_option("--masks", ta.masks, "directory of <image id>.png lesion masks (lp+lm)");
    train->add_option("--valid-set", ta.valid_set, "valid_set.json (lp+lr)");
    train->add_option("--out", ta.out, "run directory")->required();
    train->add_option("--seed", ta.seed, "seed for initialization and shuffling");
    train->add_option("--epochs", ta.epochs, "number of epochs");
    train->add_option("--batch-size", ta.batch_size, "images per optimization step");
    train->add_option("--mask-polarity", ta.mask_polarity, "lesion-white | lesion-black");
    train->add_flag("--resume", ta.resume, "continue from RUNDIR/state.ppt");

    EvalArgs ea;
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Balanced accuracy and per-class recall");
    evaluate_cmd->add_option("--ckpt", ea.ckpt, "checkpoint")->required();
    evaluate_cmd->add_option("--data", ea.data, "manifest.csv")->required();
    evaluate_cmd->add_option("--out", ea.out, "report.json")->required();

    ExplainArgs xa;
    auto* explain_cmd = app.add_subcommand("explain", "Top activated prototypes for one image");
    explain_cmd->add_option("--ckpt", xa.ckpt, "checkpoint")->required();
    explain_cmd->add_option("--image", xa.image, "PNG image")->required();
    explain_cmd->add_option("--top", xa.top, "number of prototypes");
    explain_cmd->add_option("--out", xa.out, "explanation JSON")->required();
    explain_cmd->add_option("--render", xa.render, "optional PNG panel");

    AuditArgs aa;
    auto* audit_cmd = app.add_subcommand("audit", "Check that prototypes sit inside or on the border of lesions");
    audit_cmd->add_option("--ckpt", aa.ckpt, "post-projection checkpoint")->required();
    audit_cmd->add_option("--data", aa.data, "manifest listing the prototype source images")->required();
    audit_cmd->add_option("--masks", aa.masks, "mask directory (defaults to the manifest mask column)");
    audit_cmd->add_option("--mask-polarity", aa.mask_polarity, "lesion-white | lesion-black");
    audit_cmd->add_option("--boundary", aa.boundary, "boundary tolerance in pixels");
    audit_cmd->add_option("--out", aa.out, "audit JSON")->required();

    ServeArgs sa;
    auto* serve = app.add_subcommand("serve", "Prototype review service");
    serve->add_option("--ckpt", sa.ckpt, "post-projection checkpoint")->required();
    serve->add_option("--port", sa.port, "TCP port");
    serve->add_option("--host", sa.host, "bind address");
    serve->add_option("--run-dir", sa.run_dir, "where the review session is stored (default: checkpoint dir)");
    serve->add_flag("--allow-partial", sa.allow_partial, "allow export while prototypes are pending");
    serve->add_option("--ui", sa.ui, "static UI directory served at /");

    SynthArgs ya;
    auto* synth = app.add_subcommand("synth", "Generate the synthetic lesion dataset");
    synth->add_option("--n", ya.config.n_per_class, "images per class");
    synth->add_option("--seed", ya.config.seed, "generator seed");
    synth->add_option("--confound-fraction", ya.config.confound_fraction, "share of MEL images with a black corner");
    synth->add_option("--size", ya.config.size, "image side in pixels");
    synth->add_option("--out", ya.out, "output directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (train->parsed()) return cmd_train(ta, out);
        if (evaluate_cmd->parsed()) return cmd_evaluate(ea, out);
        if (explain_cmd->parsed()) return cmd_explain(xa, out);
        if (audit_cmd->parsed()) return cmd_audit(aa, out);
        if (serve->parsed()) return cmd_serve(sa, out);
        if (synth->parsed()) return cmd_synth(ya, out);
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const ValidationError& e) {
        err << "validation error: " << e.what() << "\n";
        report_items(err, e.items());
        return 1;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    err << app.help();
    return 1;
}

}  // namespace protopart

// d2ae command line: dataset generation, training, evaluation, probing, editing, serving.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "d2ae/d2ae.hpp"

namespace {

using namespace d2ae;
using nlohmann::json;

// Bad arguments detected after parsing; mapped to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError(path + ": " + e.what());
    }
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path);
}

Dataset dataset_for(const std::string& data_dir, const json& meta) {
    if (!data_dir.empty()) return load_dataset(data_dir);
    const json d = meta.value("dataset", json::object());
    if (d.value("source", "") != "synthetic")
        throw UsageError("no --data given and the checkpoint was not trained on synthetic data");
    return generate(d.at("seed").get<std::uint64_t>(), d.at("n_id").get<int>(), d.at("samples_per_id").get<int>(),
                    d.at("image_size").get<std::size_t>());
}

ProbeModel probes_for(const Checkpoint& ck, const std::string& probes_path) {
    if (probes_path.empty()) return ck.probes;
    try {
        return read_json_file(probes_path).get<ProbeModel>();
    } catch (const json::exception& e) {
        throw UsageError(probes_path + ": " + e.what());
    }
}

Tensor<float> read_image(const std::string& path, std::size_t size) {
    Tensor<float> img = to_tensor(decode_png(read_file_bytes(path)));
    if (img.dim(1) != size || img.dim(2) != size) img = resize_bilinear(img, size, size);
    return img;
}

int cmd_gen_data(std::uint64_t seed, int n_id, int per_id, std::size_t size, const std::string& out) {
    const Dataset ds = generate(seed, n_id, per_id, size);
    save_dataset(ds, out);
    std::cout << json{{"out", out}, {"samples", ds.samples.size()}, {"n_id", n_id}}.dump() << "\n";
    return 0;
}

int cmd_train(const std::string& data, const std::string& config, const std::string& out_ckpt, const std::string& log_path) {
    const Dataset ds = load_dataset(data);
    json cfg = config.empty() ? json::object() : read_json_file(config);
    ModelConfig mc;
    TrainConfig tc;
    try {
        mc = cfg.value("model", json::object()).get<ModelConfig>();
        tc = cfg.value("train", json::object()).get<TrainConfig>();
    } catch (const std::exception& e) {
        throw UsageError(config + ": " + e.what());
    }
    mc.n_id = static_cast<std::size_t>(ds.manifest.n_id);
    mc.input_size = static_cast<std::size_t>(ds.manifest.image_size);
    try {
        mc.validate();
        tc.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }

    std::ofstream log_file;
    if (!log_path.empty()) {
        log_file.open(log_path);
        if (!log_file) throw std::runtime_error("cannot write " + log_path);
    }
    TrainOptions opts;
    if (log_file.is_open()) opts.log = &log_file;
    opts.on_epoch = [&](const EpochRecord& r) {
        std::cerr << "epoch " << r.epoch << "/" << tc.epochs << "  total " << r.mean.total << "  l_id " << r.mean.l_id
                  << "  l_rec " << r.mean.l_rec_clean << (r.eval.is_null() ? "" : "  val " + r.eval.dump()) << "\n";
        return true;
    };
    D2AEModel<float> m(mc);
    const auto history = train(m, ds, tc, opts);

    const FeatureSet fit_fs = extract_features(m, ds, Split::Train);
    const FeatureSet val_fs = extract_features(m, ds, Split::Val);
    const ProbeModel probes = train_edit_probes(fit_fs, val_fs, ds);
    json meta = {{"train_config", tc},
                 {"epoch", history.empty() ? 0 : history.back().epoch},
                 {"seed", tc.seed},
                 {"metrics", history.empty() ? json(nullptr) : history.back().eval},
                 {"dataset",
                  {{"source", ds.manifest.source},
                   {"seed", ds.manifest.seed},
                   {"n_id", ds.manifest.n_id},
                   {"samples_per_id", ds.manifest.samples_per_id},
                   {"image_size", ds.manifest.image_size}}}};
    save_checkpoint(out_ckpt, m, probes, meta);
    std::cout << json{{"checkpoint", out_ckpt}, {"sha256", file_sha256(out_ckpt)}, {"metrics", meta["metrics"]}}.dump()
              << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out, const std::string& artifacts) {
    const Checkpoint ck = load_checkpoint(ckpt);
    const Dataset ds = dataset_for(data, ck.metadata);
    json report = eval_report(ck.model, ds);
    report["checkpoint_sha256"] = file_sha256(ckpt);
    if (!artifacts.empty()) {
        namespace fs = std::filesystem;
        fs::create_directories(artifacts);
        const FeatureSet test_fs = extract_features(ck.model, ds, Split::Test);
        std::ostringstream pcsv;
        pcsv << "attribute,acc_T,acc_P,acc_C\n";
        for (const auto& r : report["probes"]["attributes"])
            pcsv << r["attribute"].get<std::string>() << ',' << r["acc_T"] << ',' << r["acc_P"] << ',' << r["acc_C"] << '\n';
        const auto& idr = report["probes"]["identity"];
        pcsv << "identity," << idr["acc_T"] << ',' << idr["acc_P"] << ',' << idr["acc_C"] << '\n';
        write_text((fs::path(artifacts) / "probes.csv").string(), pcsv.str());
        const Eigen::MatrixXd emb = embed_2d(test_fs.T);
        const Eigen::MatrixXd emb_p = embed_2d(test_fs.P);
        std::ostringstream csv;
        csv << "sample,identity,t_x,t_y,p_x,p_y\n";
        for (Eigen::Index i = 0; i < emb.rows(); ++i)
            csv << test_fs.samples[static_cast<std::size_t>(i)] << ',' << test_fs.identity[static_cast<std::size_t>(i)]
                << ',' << emb(i, 0) << ',' << emb(i, 1) << ',' << emb_p(i, 0) << ',' << emb_p(i, 1) << '\n';
        write_text((fs::path(artifacts) / "embedding.csv").string(), csv.str());
        // Residual maps: signed change rescaled around mid-gray.
        const auto mean = mean_features<float>(test_fs);
        for (const auto& e : ck.probes.entries) {
            Tensor<float> r = residual_map(ck.model, mean, e.branch, e.w, alpha_max(e, ck.model));
            float peak = 1e-8f;
            for (float v : r.data()) peak = std::max(peak, std::abs(v));
            for (auto& v : r.data()) v = 0.5f + 0.5f * v / peak;
            write_file_bytes(fs::path(artifacts) / ("residual_" + e.attribute + "_" + std::string(branch_name(e.branch)) + ".png"),
                             encode_png(to_rgb8(r)));
        }
    }
    const std::string text = report.dump(2);
    if (!out.empty()) write_text(out, text + "\n");
    std::cout << text << "\n";
    return 0;
}

int cmd_probe(const std::string& ckpt, const std::string& data, const std::string& out) {
    const Checkpoint ck = load_checkpoint(ckpt);
    const Dataset ds = dataset_for(data, ck.metadata);
    const ProbeModel probes =
        train_edit_probes(extract_features(ck.model, ds, Split::Train), extract_features(ck.model, ds, Split::Val), ds);
    write_text(out, json(probes).dump(2) + "\n");
    json summary = json::array();
    for (const auto& e : probes.entries)
        summary.push_back({{"name", edit_name(e)}, {"accuracy", e.accuracy}, {"alpha_max", alpha_max(e, ck.model)}});
    std::cout << json{{"out", out}, {"probes", summary}}.dump(2) << "\n";
    return 0;
}

int cmd_edit(const std::string& ckpt, const std::string& probes_path, const std::string& image,
             const std::vector<std::string>& attrs, const std::string& identity_image, std::optional<double> beta,
             const std::string& out) {
    EditRequest<float> req;
    for (const auto& a : attrs) {
        const auto eq = a.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("--attr expects name=alpha, got '" + a + "'");
        double alpha;
        try {
            std::size_t used = 0;
            alpha = std::stod(a.substr(eq + 1), &used);
            if (used != a.size() - eq - 1) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw UsageError("--attr '" + a + "': alpha is not a number");
        }
        req.edits.push_back({a.substr(0, eq), alpha});
    }
    if (beta && identity_image.empty()) throw UsageError("--beta requires --identity-image");
    const Checkpoint ck = load_checkpoint(ckpt);
    const ProbeModel probes = probes_for(ck, probes_path);
    const std::size_t size = ck.model.config().input_size;
    if (!identity_image.empty())
        req.identity = IdentityTarget<float>{encode(ck.model, read_image(identity_image, size)).f_T, beta.value_or(0.0)};
    EditResult<float> r;
    try {
        r = render_edit(ck.model, probes, read_image(image, size), req);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    write_file_bytes(out, encode_png(to_rgb8(r.image)));
    for (const auto& w : r.provenance.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << json{{"out", out}, {"provenance", r.provenance}}.dump(2) << "\n";
    return 0;
}

int cmd_stats(const std::string& ckpt, const std::string& data) {
    const Checkpoint ck = load_checkpoint(ckpt);
    const Dataset ds = dataset_for(data, ck.metadata);
    json report = channel_report(extract_features(ck.model, ds, Split::Test));
    report["checkpoint_sha256"] = file_sha256(ckpt);
    std::cout << report.dump(2) << "\n";
    return 0;
}

int cmd_serve(const std::string& ckpt, const std::string& probes_path, const std::string& data, int port,
              const std::string& host) {
    if (const char* env = std::getenv("D2AE_PORT"); env && *env) {
        try {
            port = std::stoi(env);
        } catch (const std::exception&) {
            throw UsageError(std::string("D2AE_PORT is not a port number: ") + env);
        }
    }
    if (port < 0 || port > 65535) throw UsageError("port out of range");
    const Checkpoint ck = load_checkpoint(ckpt);
    std::vector<GalleryItem> gallery;
    try {
        const Dataset ds = dataset_for(data, ck.metadata);
        std::set<int> seen;
        for (auto i : ds.indices(Split::Test))
            if (seen.insert(ds.samples[i].identity).second) gallery.push_back({i, ds.samples[i].identity, ds.samples[i].image});
    } catch (const UsageError& e) {
        std::cerr << "gallery disabled: " << e.what() << "\n";
    }
    const EditService svc(ck.model, probes_for(ck, probes_path), file_sha256(ckpt), std::move(gallery));
    httplib::Server srv;
    register_routes(srv, svc);
    if (port == 0) port = srv.bind_to_any_port(host);
    else if (!srv.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    std::cout << json{{"listening", host + ":" + std::to_string(port)}, {"checkpoint_sha256", svc.checkpoint_hash()}}.dump()
              << std::endl;
    if (!srv.listen_after_bind()) throw std::runtime_error("server stopped unexpectedly");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"D2AE: distilling and dispelling autoencoder toolkit"};
    app.require_subcommand(1);

    std::uint64_t seed = 7;
    int n_id = 16, per_id = 50;
    std::size_t size = 32;
    std::string out, data, config, ckpt, probes, image, identity_image, log_path, artifacts, host = "127.0.0.1";
    std::vector<std::string> attrs;
    double beta = 1.0;
    int port = 8080;

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic face dataset");
    gen->add_option("--seed", seed, "Dataset seed")->capture_default_str();
    gen->add_option("--n-id", n_id, "Number of identities")->capture_default_str()->check(CLI::Range(2, 100000));
    gen->add_option("--per-id", per_id, "Samples per identity")->capture_default_str()->check(CLI::Range(1, 100000));
    gen->add_option("--size", size, "Image side in pixels")->capture_default_str()->check(CLI::Range(8, 1024));
    gen->add_option("--out", out, "Output directory")->required();

    auto* tr = app.add_subcommand("train", "Train a model and its editing probes");
    tr->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    tr->add_option("--config", config, "JSON file with optional 'model' and 'train' sections")->check(CLI::ExistingFile);
    tr->add_option("--out-ckpt", out, "Checkpoint to write")->required();
    tr->add_option("--log", log_path, "Per-epoch JSONL log");

    auto* ev = app.add_subcommand("eval", "Verification, probe suite, Gaussianity and correlation report");
    ev->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", data, "Dataset directory (defaults to regenerating the training data)")
        ->check(CLI::ExistingDirectory);
    ev->add_option("--out", out, "Also write the JSON report here");
    ev->add_option("--artifacts", artifacts, "Directory for probe CSV, embedding CSV and residual maps");

    auto* pr = app.add_subcommand("probe", "Fit editing probes on a trained model");
    pr->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    pr->add_option("--data", data, "Dataset directory")->check(CLI::ExistingDirectory);
    pr->add_option("--out", out, "Probe JSON to write")->required();

    auto* ed = app.add_subcommand("edit", "Edit attributes or identity of one image");
    ed->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    ed->add_option("--probes", probes, "Probe JSON (defaults to the checkpoint's probes)")->check(CLI::ExistingFile);
    ed->add_option("--image", image, "Source PNG")->required()->check(CLI::ExistingFile);
    ed->add_option("--attr", attrs, "name=alpha; name may carry @T or @P")->take_all();
    ed->add_option("--identity-image", identity_image, "PNG whose identity is mixed in")
                       ->check(CLI::ExistingFile);
    auto* beta_opt = ed->add_option("--beta", beta, "Weight of the source identity, in [0,1]");
    ed->add_option("--out", out, "Edited PNG")->required();

    auto* st = app.add_subcommand("stats", "Channel Gaussianity and correlation only");
    st->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    st->add_option("--data", data, "Dataset directory")->check(CLI::ExistingDirectory);

    auto* sv = app.add_subcommand("serve", "HTTP editing service (D2AE_PORT overrides --port)");
    sv->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    sv->add_option("--probes", probes, "Probe JSON (defaults to the checkpoint's probes)")->check(CLI::ExistingFile);
    sv->add_option("--data", data, "Dataset directory for /gallery")->check(CLI::ExistingDirectory);
    sv->add_option("--port", port, "Port, 0 picks a free one")->capture_default_str();
    sv->add_option("--host", host, "Bind address")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(seed, n_id, per_id, size, out);
        if (tr->parsed()) return cmd_train(data, config, out, log_path);
        if (ev->parsed()) return cmd_eval(ckpt, data, out, artifacts);
        if (pr->parsed()) return cmd_probe(ckpt, data, out);
        if (ed->parsed())
            return cmd_edit(ckpt, probes, image, attrs, identity_image,
                            beta_opt->count() ? std::optional<double>(beta) : std::nullopt, out);
        if (st->parsed()) return cmd_stats(ckpt, data);
        if (sv->parsed()) return cmd_serve(ckpt, probes, data, port, host);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

// Acceptance run: prints one PASS/FAIL line per criterion A1..A9 and exits nonzero on any FAIL.
// The toy trainings (full model, two ablations, a repeat for determinism) dominate the runtime.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "../test_support.hpp"

using namespace d2ae;
using namespace d2ae::testing;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdicts {
    std::map<std::string, bool> pass;
    void report(const std::string& id, bool ok, const std::string& detail) {
        pass[id] = ok;
        std::cout << id << " " << (ok ? "PASS" : "FAIL") << "  " << detail << std::endl;
    }
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

// ---- A1 ------------------------------------------------------------------

void check_routing(Verdicts& v) {
    const auto t0 = Clock::now();
    ModelConfig mc;
    mc.seed = 101;
    D2AEModel<double> m(mc);
    jitter_biases(m, 102);
    const auto x = random_images<double>(4, mc.input_size, 103);
    const std::vector<std::size_t> labels{3, 0, 15, 7};
    const auto noise = gaussian_noise<double>(4, mc, 0.5, 104);
    const TrainConfig c;
    const auto mask = route_mask(m, x, labels, c, noise);
    // Rows: L_I, L_I^adv, L_H, L_X + L̃_X. Columns follow kAllGroups.
    const std::vector<std::vector<bool>> expected = {
        {true, true, false, true, false, false},
        {false, false, false, false, true, false},
        {true, false, true, false, false, false},
        {true, true, true, false, false, true},
    };
    std::size_t held = 0;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < kAllGroups.size(); ++j) held += mask[i][j] == expected[i][j];
    const double secs = seconds_since(t0);
    v.report("A1", held == 24 && secs < 60,
             std::to_string(held) + "/24 route assertions, " + fmt(secs, 1) + " s");
}

// ---- A2 ------------------------------------------------------------------

void check_gradients(Verdicts& v) {
    const auto t0 = Clock::now();
    ModelConfig mc;
    mc.seed = 201;
    D2AEModel<double> m(mc);
    jitter_biases(m, 202);
    const auto x = random_images<double>(2, mc.input_size, 203);
    const auto noise = gaussian_noise<double>(2, mc, 0.5, 204);
    const TrainConfig c;
    const auto r = routed_fd_check(m, x, {4, 11}, c, noise, 240, 205);
    const double secs = seconds_since(t0);
    v.report("A2", r.checked >= 200 && r.worst <= 1e-3 && secs < 300,
             "worst rel err " + fmt(r.worst, 8) + " over " + std::to_string(r.checked) + " params, " + fmt(secs, 1) +
                 " s");
}

// ---- A3 ------------------------------------------------------------------

void check_closed_forms(Verdicts& v) {
    std::vector<std::string> bad;
    const std::vector<double> u10(10, 0.1), u4(4, 0.25);
    if (std::abs(loss_identity(u10, 4) - std::log(10.0)) > 1e-12) bad.push_back("L_I(uniform10)");
    const double h4 = loss_confusion(u4);
    if (std::abs(h4 - std::log(4.0)) > 1e-12) bad.push_back("L_H(uniform4)");
    Rng r(301);
    std::exponential_distribution<double> ex(1.0);
    double min_seen = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 100000; ++i) {
        std::vector<double> y(4);
        double s = 0;
        for (auto& e : y) s += (e = ex(r));
        for (auto& e : y) e /= s;
        min_seen = std::min(min_seen, loss_confusion(y));
    }
    if (!(min_seen >= h4)) bad.push_back("L_H minimum");
    std::vector<double> xa(48, 0.5), xb = xa;
    xb[20] += 1.0;
    if (loss_reconstruction(xa, xb) != 0.5) bad.push_back("L_X single pixel");
    TrainConfig c;
    c.lambda_T = 1;
    c.lambda_P = 0.1;
    c.lambda_X = 1.81e-5;
    const LossBundle b{2.0, 3.0, 1.5, 100, 110, 0, false};
    const double hand = 1 * 2.0 + 0.1 * (3.0 + 1.5) + 1.81e-5 * (100 + 110);
    if (std::abs(total_objective(b, c) - hand) > 1e-9) bad.push_back("total objective");
    std::string detail = "min L_H over 1e5 simplex points " + fmt(min_seen, 6) + " vs ln4 " + fmt(std::log(4.0), 6);
    for (const auto& s : bad) detail += "; bad: " + s;
    v.report("A3", bad.empty(), detail);
}

// ---- toy training ----------------------------------------------------------

struct ToySpec {
    int seed = 7, n_id = 16, per_id = 50;
    std::size_t size = 32;
    ModelConfig model;
    TrainConfig train;
};

ToySpec read_toy(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const json j = json::parse(in);
    ToySpec s;
    const json d = j.value("dataset", json::object());
    s.seed = d.value("seed", s.seed);
    s.n_id = d.value("n_id", s.n_id);
    s.per_id = d.value("samples_per_id", s.per_id);
    s.size = d.value("image_size", s.size);
    s.model = j.value("model", json::object()).get<ModelConfig>();
    s.model.n_id = static_cast<std::size_t>(s.n_id);
    s.model.input_size = s.size;
    s.train = j.value("train", json::object()).get<TrainConfig>();
    return s;
}

struct ToyRun {
    std::string label;
    D2AEModel<float> model;
    ProbeTable probes;
    SplitMetrics test;
    double seconds = 0;
    fs::path ckpt;

    double attribute_mean_P() const {
        double s = 0;
        for (const auto& r : probes.rows) s += r.acc_P;
        return probes.rows.empty() ? 0 : s / static_cast<double>(probes.rows.size());
    }
    const ProbeRow* row(const std::string& name) const {
        for (const auto& r : probes.rows)
            if (r.attribute == name) return &r;
        return nullptr;
    }
};

ToyRun run_toy(const std::string& label, const ToySpec& spec, const TrainConfig& tc, const Dataset& ds,
               const fs::path& workdir) {
    std::cerr << "training " << label << " (" << tc.epochs << " epochs)" << std::endl;
    ToyRun r{label, D2AEModel<float>(spec.model), {}, {}, 0, workdir / (label + ".ckpt")};
    const auto t0 = Clock::now();
    TrainOptions opts;
    opts.eval_every = 0;
    std::ofstream log(workdir / (label + ".jsonl"));
    opts.log = &log;
    opts.on_epoch = [&](const EpochRecord& e) {
        if (e.epoch % 20 == 0) std::cerr << "  " << label << " epoch " << e.epoch << " l_id " << e.mean.l_id << std::endl;
        return true;
    };
    train(r.model, ds, tc, opts);
    r.seconds = seconds_since(t0);
    const FeatureSet tr = extract_features(r.model, ds, Split::Train);
    const FeatureSet te = extract_features(r.model, ds, Split::Test);
    r.probes = probe_suite(tr, te, ds);
    r.test = evaluate_split(r.model, ds, Split::Test);
    const ProbeModel edit_probes = train_edit_probes(tr, extract_features(r.model, ds, Split::Val), ds);
    save_checkpoint(r.ckpt, r.model, edit_probes, {{"train_config", tc}, {"seed", tc.seed}, {"epoch", tc.epochs}});
    std::ofstream(workdir / (label + "_report.json"))
        << json{{"probes", r.probes}, {"test", r.test}, {"seconds", r.seconds}}.dump(2) << "\n";
    return r;
}

void check_toy(Verdicts& v, const ToyRun& r, double chance) {
    const double h_min = 0.9 * std::log(static_cast<double>(r.model.config().n_id));
    const ProbeRow* hue = r.row("hue");
    const ProbeRow* smile = r.row("smile");
    const bool a = r.probes.identity_T >= 0.90;
    const bool b = r.probes.identity_P <= 2 * chance;
    const bool c = r.test.entropy_P >= h_min;
    const bool d_hue = hue && hue->acc_P - hue->acc_T >= 0.10;
    const bool d_smile = smile && smile->acc_P - smile->acc_T >= 0.10;
    const bool d_id = r.probes.identity_T - r.probes.identity_P >= 0.30;
    const bool e = r.test.psnr >= 20.0;
    const bool t = r.seconds <= 1800;
    auto mark = [](bool ok) { return ok ? "ok" : "FAIL"; };
    std::ostringstream os;
    os << "(a) id_T " << fmt(r.probes.identity_T) << " " << mark(a) << "; (b) id_P " << fmt(r.probes.identity_P) << " "
       << mark(b) << "; (c) H_P " << fmt(r.test.entropy_P) << " >= " << fmt(h_min) << " " << mark(c) << "; (d) hue P/T "
       << (hue ? fmt(hue->acc_P) + "/" + fmt(hue->acc_T) : "n/a") << " " << mark(d_hue) << ", smile P/T "
       << (smile ? fmt(smile->acc_P) + "/" + fmt(smile->acc_T) : "n/a") << " " << mark(d_smile) << ", id T-P "
       << fmt(r.probes.identity_T - r.probes.identity_P) << " " << mark(d_id) << "; (e) PSNR " << fmt(r.test.psnr, 2)
       << " dB " << mark(e) << "; " << fmt(r.seconds, 0) << " s " << mark(t);
    v.report("A4", a && b && c && d_hue && d_smile && d_id && e && t, os.str());
}

// ---- A6 ------------------------------------------------------------------

// Full ROC by direct enumeration: every distinct score (descending) plus +inf.
std::vector<RocPoint> brute_roc(const std::vector<double>& same, const std::vector<double>& diff) {
    std::set<double, std::greater<>> th(same.begin(), same.end());
    th.insert(diff.begin(), diff.end());
    std::vector<RocPoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
    for (double t : th) {
        std::size_t tp = 0, fp = 0;
        for (double s : same) tp += s >= t;
        for (double s : diff) fp += s >= t;
        out.push_back({t, static_cast<double>(fp) / static_cast<double>(diff.size()),
                       static_cast<double>(tp) / static_cast<double>(same.size())});
    }
    return out;
}

void check_analytics(Verdicts& v) {
    Rng r(601);
    std::size_t roc_ok = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int ns = 1 + static_cast<int>(uniform(r, 0, 200)), nd = 1 + static_cast<int>(uniform(r, 0, 200));
        const double grid = trial % 2 ? 20.0 : 1e6;  // half the lists carry heavy ties
        std::vector<double> same, diff;
        for (int i = 0; i < ns; ++i) same.push_back(std::round(uniform(r, -1, 1) * grid) / grid);
        for (int i = 0; i < nd; ++i) diff.push_back(std::round(uniform(r, -1, 1) * grid) / grid);
        const auto got = verification_roc(same, diff).roc;
        const auto want = brute_roc(same, diff);
        bool eq = got.size() == want.size();
        for (std::size_t i = 0; eq && i < got.size(); ++i)
            eq = got[i].threshold == want[i].threshold && got[i].fpr == want[i].fpr && got[i].tpr == want[i].tpr;
        roc_ok += eq;
    }

    std::normal_distribution<double> nd;
    Eigen::VectorXd g(10000), u(10000);
    for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = nd(r);
    for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = uniform(r, -1, 1);
    const double r2g = gaussianity_of(g).adj_r2, r2u = gaussianity_of(u).adj_r2;

    Eigen::MatrixXd ft(10000, 4), fp(10000, 4);
    for (Eigen::Index i = 0; i < ft.rows(); ++i)
        for (Eigen::Index j = 0; j < 4; ++j) {
            ft(i, j) = nd(r);
            fp(i, j) = uniform(r, 0, 1);
        }
    const auto corr = channel_correlation(ft, fp);
    double worst = 0;
    for (Eigen::Index i = 0; i < corr.rho.rows(); ++i)
        for (Eigen::Index j = 0; j < corr.rho.cols(); ++j)
            if (i != j) worst = std::max(worst, std::abs(corr.rho(i, j)));

    const bool ok = roc_ok == 1000 && r2g >= 0.95 && r2u < r2g && worst < 0.05;
    v.report("A6", ok,
             "ROC " + std::to_string(roc_ok) + "/1000 exact; adj-R2 gaussian " + fmt(r2g) + " uniform " + fmt(r2u) +
                 "; max off-diagonal |rho| " + fmt(worst));
}

// ---- A7 ------------------------------------------------------------------

bool same_bits(std::span<const float> a, std::span<const float> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

void check_editing(Verdicts& v, const D2AEModel<float>& m, const ProbeModel& probes, const Dataset& ds) {
    const auto idx = ds.indices(Split::Test);
    std::size_t empty_ok = 0, interp_ok = 0, additive_ok = 0, clamp_ok = 0, n = 0;
    std::vector<AttributeEdit> all_edits;
    for (const auto& e : probes.entries) all_edits.push_back({edit_name(e), 0.37 * alpha_max(e, m)});
    for (std::size_t k = 0; k + 1 < idx.size() && n < 20; k += 7, ++n) {
        const Tensor<float>& xa = ds.samples[idx[k]].image;
        const Tensor<float>& xb = ds.samples[idx[k + 1]].image;
        const auto fa = encode(m, xa), fb = encode(m, xb);
        const Tensor<float> recon = decode(m, fa);

        empty_ok += same_bits(render_edit(m, probes, xa, EditRequest<float>{}).image.data(), recon.data());

        EditRequest<float> one;
        one.identity = IdentityTarget<float>{fb.f_T, 1.0};
        EditRequest<float> zero;
        zero.identity = IdentityTarget<float>{fb.f_T, 0.0};
        interp_ok += same_bits(render_edit(m, probes, xa, one).image.data(), recon.data()) &&
                     same_bits(render_edit(m, probes, xa, zero).image.data(),
                               decode(m, FeaturePair<float>{fb.f_T, fa.f_P}).data());

        // Additivity: the joint offset equals the sum of single offsets, per branch, whatever
        // the request order. Singles are summed in the name order the joint delta uses.
        std::vector<std::string> warn;
        auto joint = resolve_edits(m, probes, all_edits, &warn);
        const std::vector<AttributeEdit> reversed(all_edits.rbegin(), all_edits.rend());
        const auto joint_rev = resolve_edits(m, probes, reversed, &warn);
        std::sort(joint.begin(), joint.end(), [](const AppliedEdit& a, const AppliedEdit& b) { return a.attribute < b.attribute; });
        bool add = edit_attribute(m, fa, probes, all_edits) == edit_attribute(m, fa, probes, reversed);
        for (Branch b : {Branch::T, Branch::P}) {
            const auto total = edit_delta(probes, joint, b, m.feat_dim(b));
            add = add && total == edit_delta(probes, joint_rev, b, m.feat_dim(b));
            std::vector<double> sum(m.feat_dim(b), 0.0);
            for (const auto& e : joint) {
                const auto d = edit_delta(probes, std::vector<AppliedEdit>{e}, b, m.feat_dim(b));
                for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += d[i];
            }
            add = add && total == sum;
        }
        additive_ok += add;

        // Requests beyond the bound are clamped to exactly ±alpha_max and echoed.
        const ProbeEntry& pe = probes.entries[n % probes.entries.size()];
        const double amax = alpha_max(pe, m);
        EditProvenance prov;
        const double sign = n % 2 ? -1.0 : 1.0;
        const auto out = edit_attribute(m, fa, probes, {{edit_name(pe), sign * 5 * amax}}, &prov);
        const auto expect = edit_attribute(m, fa, probes, {{edit_name(pe), sign * amax}});
        const json pj = prov;
        clamp_ok += prov.edits.size() == 1 && prov.edits[0].clamped && prov.edits[0].applied == sign * amax &&
                    pj["edits"][0]["alpha"].get<double>() == sign * amax && pj["edits"][0]["clamped"] == true &&
                    !prov.warnings.empty() && out == expect;
    }
    const bool ok = n > 0 && empty_ok == n && interp_ok == n && additive_ok == n && clamp_ok == n;
    v.report("A7", ok,
             "over " + std::to_string(n) + " test images: empty " + std::to_string(empty_ok) + ", endpoints " +
                 std::to_string(interp_ok) + ", additivity " + std::to_string(additive_ok) + ", clamp " +
                 std::to_string(clamp_ok));
}

// ---- A8 ------------------------------------------------------------------

void check_persistence(Verdicts& v, const ToyRun& run) {
    const Checkpoint ck = load_checkpoint(run.ckpt);
    const auto& a = run.model;
    const auto& b = ck.model;
    bool tensors = a.params().size() == b.params().size() && same_bits(a.sigma_T.data(), b.sigma_T.data()) &&
                   same_bits(a.sigma_P.data(), b.sigma_P.data());
    for (std::size_t i = 0; tensors && i < a.params().size(); ++i)
        tensors = a.params()[i].name() == b.params()[i].name() && a.params()[i].value.shape() == b.params()[i].value.shape() &&
                  same_bits(a.params()[i].value.data(), b.params()[i].value.data());

    const std::size_t s = a.config().input_size;
    const auto x = random_images<float>(100, s, 801);
    std::size_t same = 0;
    for (std::size_t i = 0; i < 100; ++i) {
        Tensor<float> xi(Shape{3, s, s}, std::vector<float>(x.ptr() + i * 3 * s * s, x.ptr() + (i + 1) * 3 * s * s));
        const auto fa = encode(a, xi), fb = encode(b, xi);
        same += fa == fb && same_bits(decode(a, fa).data(), decode(b, fb).data()) &&
                classify<float>(a, fa.f_T, Branch::T) == classify<float>(b, fb.f_T, Branch::T) &&
                classify<float>(a, fa.f_P, Branch::P) == classify<float>(b, fb.f_P, Branch::P);
    }
    // A second save of the reloaded state must reproduce the file.
    const fs::path again = run.ckpt.string() + ".resaved";
    save_checkpoint(again, ck.model, ck.probes, ck.metadata);
    const bool bytes = file_sha256(again) == file_sha256(run.ckpt);
    v.report("A8", tensors && same == 100 && bytes,
             std::string("tensors ") + (tensors ? "bit-exact" : "DIFFER") + "; forward identical on " +
                 std::to_string(same) + "/100 inputs; re-save " + (bytes ? "byte-identical" : "DIFFERS"));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"D2AE acceptance checks"};
    std::string workdir = "acceptance_work";
    std::string config = D2AE_TOY_CONFIG;
    std::string only;
    app.add_option("--workdir", workdir, "Directory for checkpoints and logs")->capture_default_str();
    app.add_option("--config", config, "Toy run configuration")->capture_default_str();
    app.add_option("--only", only, "Comma-separated subset, e.g. A1,A3");
    CLI11_PARSE(app, argc, argv);

    auto want = [&](const std::string& id) {
        if (only.empty()) return true;
        std::stringstream ss(only);
        for (std::string tok; std::getline(ss, tok, ',');)
            if (tok == id) return true;
        return false;
    };
    fs::create_directories(workdir);
    Verdicts v;
    try {
        if (want("A1")) check_routing(v);
        if (want("A2")) check_gradients(v);
        if (want("A3")) check_closed_forms(v);
        if (want("A6")) check_analytics(v);

        const bool need_toy = want("A4") || want("A5") || want("A7") || want("A8") || want("A9");
        if (need_toy) {
            const ToySpec spec = read_toy(config);
            const Dataset ds = generate(static_cast<std::uint64_t>(spec.seed), spec.n_id, spec.per_id, spec.size);
            const double chance = 1.0 / spec.n_id;
            const ToyRun full = run_toy("full", spec, spec.train, ds, workdir);
            if (want("A4")) check_toy(v, full, chance);
            if (want("A5")) {
                TrainConfig no_h = spec.train;
                no_h.use_conf = false;
                TrainConfig no_adv = spec.train;
                no_adv.use_adv = false;
                const ToyRun rh = run_toy("no_conf", spec, no_h, ds, workdir);
                const ToyRun ra = run_toy("no_adv", spec, no_adv, ds, workdir);
                const double d_id = rh.probes.identity_P - full.probes.identity_P;
                const double d_attr = full.attribute_mean_P() - ra.attribute_mean_P();
                v.report("A5", d_id >= 0.05 && d_attr >= 0.01,
                         "without L_H: f_P identity " + fmt(full.probes.identity_P) + " -> " +
                             fmt(rh.probes.identity_P) + " (need +0.05); without L_adv: f_P attribute mean " +
                             fmt(full.attribute_mean_P()) + " -> " + fmt(ra.attribute_mean_P()) + " (need -0.01)");
            }
            if (want("A7")) check_editing(v, full.model, load_checkpoint(full.ckpt).probes, ds);
            if (want("A8")) check_persistence(v, full);
            if (want("A9")) {
                const ToyRun again = run_toy("repeat", spec, spec.train, ds, workdir);
                const std::string h1 = file_sha256(full.ckpt), h2 = file_sha256(again.ckpt);
                v.report("A9", h1 == h2, "sha256 " + h1.substr(0, 16) + " vs " + h2.substr(0, 16));
            }
        }
    } catch (const std::exception& e) {
        std::cout << "aborted: " << e.what() << std::endl;
        return 1;
    }
    bool all = !v.pass.empty();
    for (const auto& [id, ok] : v.pass) all = all && ok;
    return all ? 0 : 1;
}

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sfh/adapt.hpp"
#include "sfh/datasim.hpp"
#include "sfh/errors.hpp"
#include "sfh/manifest.hpp"
#include "sfh/pipeline.hpp"
#include "sfh/rng.hpp"
#include "sfh/statstore.hpp"

namespace {

std::uint64_t default_seed() {
  if (const char* env = std::getenv("SFH_SEED"))
    return std::strtoull(env, nullptr, 10);
  return 42;
}

sfh::StatsBundle load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw sfh::NotFound("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return sfh::deserialize(bytes);
}

void save_bundle(const sfh::StatsBundle& bundle, const std::string& path) {
  const auto bytes = sfh::serialize(bundle);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw sfh::Error("cannot write " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw sfh::Error("write failed for " + path);
}

sfh::StatsBundle weights_bundle(const sfh::SplitModel& model, sfh::TaskSpec::Kind task,
                                const std::string& site) {
  sfh::StatsBundle b;
  b.model = model;
  b.model.predictor_frozen = false;
  b.meta.k = 0;
  b.meta.n_features = model.feature_dim;
  b.meta.task = task;
  b.meta.created_unix = static_cast<std::int64_t>(std::time(nullptr));
  b.meta.site_id = site;
  return b;
}

struct GenArgs {
  std::string task = "classification";
  std::string sites =
      "none,intensity_down:0.5,intensity_up:1.5,blur:1.0,salt_pepper:0.1";
  int n_train = 5000;
  int n_test = 2000;
  int n_classes = 11;
  std::uint64_t seed = default_seed();
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  std::vector<sfh::ShiftSpec> shifts;
  std::string tok;
  std::istringstream is(a.sites);
  while (std::getline(is, tok, ',')) shifts.push_back(sfh::parse_shift(tok));
  if (shifts.empty()) throw sfh::Error("gen: no sites given");

  std::filesystem::create_directories(a.out);
  for (std::size_t i = 0; i < shifts.size(); ++i) {
    const auto seed_i = sfh::derive_seed(a.seed, 100 + i);
    sfh::SiteDataset ds =
        a.task == "classification"
            ? sfh::generate_base(a.n_train + a.n_test, a.n_classes, seed_i)
            : sfh::make_regression(a.n_train + a.n_test, seed_i);
    sfh::assign_splits(ds, a.n_train, 0, a.n_test);
    if (shifts[i].kind != sfh::ShiftSpec::Kind::None) {
      sfh::ShiftSpec shift = shifts[i];
      shift.seed = sfh::derive_seed(a.seed, 200 + i);
      ds = sfh::apply_shift(ds, shift);
    }
    const std::string base = a.out + "/site" + std::to_string(i + 1);
    sfh::save_sfds(sfh::filter_split(ds, sfh::SplitTag::Train), base + "_train.sfds");
    sfh::save_sfds(sfh::filter_split(ds, sfh::SplitTag::Test), base + "_test.sfds");
    std::printf("site%zu %s: %d train / %d test\n", i + 1,
                sfh::shift_to_string(shifts[i]).c_str(), a.n_train, a.n_test);
  }
  return 0;
}

sfh::TaskSpec spec_for(const sfh::SiteDataset& ds) {
  sfh::TaskSpec spec;
  spec.kind = ds.task;
  if (ds.task == sfh::TaskSpec::Kind::Classification) {
    spec.loss = sfh::TaskSpec::Loss::CrossEntropy;
    spec.n_classes = ds.n_classes;
  } else {
    spec.loss = sfh::TaskSpec::Loss::MeanSquaredError;
  }
  return spec;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SFHarmony: source-free multi-site harmonisation toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* sub_gen = app.add_subcommand("gen", "Generate the multi-site benchmark");
  sub_gen->add_option("--task", gen.task)->check(CLI::IsMember({"classification", "regression"}));
  sub_gen->add_option("--sites", gen.sites, "Comma-separated shift specs");
  sub_gen->add_option("--n-train", gen.n_train);
  sub_gen->add_option("--n-test", gen.n_test);
  sub_gen->add_option("--n-classes", gen.n_classes);
  sub_gen->add_option("--seed", gen.seed);
  sub_gen->add_option("--out", gen.out)->required();

  struct {
    std::string data, out, site = "source";
    sfh::TrainConfig cfg;
    double val_fraction = 0.2;
  } tr;
  tr.cfg.seed = default_seed();
  auto* sub_train = app.add_subcommand("train", "Train the source model");
  sub_train->add_option("--data", tr.data)->required();
  sub_train->add_option("--out", tr.out)->required();
  sub_train->add_option("--site", tr.site);
  sub_train->add_option("--epochs", tr.cfg.epochs);
  sub_train->add_option("--batch-size", tr.cfg.batch_size);
  sub_train->add_option("--lr", tr.cfg.learning_rate);
  sub_train->add_option("--hidden-dim", tr.cfg.hidden_dim);
  sub_train->add_option("--feature-dim", tr.cfg.feature_dim);
  sub_train->add_option("--val-fraction", tr.val_fraction);
  sub_train->add_option("--seed", tr.cfg.seed);
  sub_train->add_flag("--all-folds", tr.cfg.all_folds);
  sub_train->add_option("--folds", tr.cfg.folds);

  struct {
    std::string model, data, out, store, site;
    int k = 2;
    sfh::EmConfig em;
    double dp_fraction = 0.0;
    std::uint64_t dp_seed = 0;
  } ex;
  auto* sub_export = app.add_subcommand("export", "Fit and package source statistics");
  sub_export->add_option("--model", ex.model)->required();
  sub_export->add_option("--data", ex.data)->required();
  sub_export->add_option("--out", ex.out);
  sub_export->add_option("--store", ex.store, "Registry directory to push into");
  sub_export->add_option("--site", ex.site, "Overrides the model's site id");
  sub_export->add_option("--k", ex.k);
  sub_export->add_option("--em-max-iters", ex.em.max_iters);
  sub_export->add_option("--em-warm-iters", ex.em.warm_iters);
  sub_export->add_option("--em-floor", ex.em.variance_floor);
  sub_export->add_option("--em-tol", ex.em.loglik_tol);
  sub_export->add_option("--em-restarts", ex.em.n_restarts);
  sub_export->add_option("--dp-fraction", ex.dp_fraction);
  sub_export->add_option("--dp-seed", ex.dp_seed);

  struct {
    std::string bundle, store, site, version, data, out;
    std::string method = "sfharmony";
    sfh::AdaptConfig cfg;
  } ad;
  ad.cfg.seed = default_seed();
  auto* sub_adapt = app.add_subcommand("adapt", "Source-free adaptation to a target site");
  sub_adapt->add_option("--bundle", ad.bundle, "Bundle file (alternative to --store)");
  sub_adapt->add_option("--store", ad.store, "Registry directory to pull from");
  sub_adapt->add_option("--site", ad.site, "Site id to pull");
  sub_adapt->add_option("--version", ad.version, "Registry version, default latest");
  sub_adapt->add_option("--data", ad.data)->required();
  sub_adapt->add_option("--out", ad.out)->required();
  sub_adapt->add_option("--method", ad.method)
      ->check(CLI::IsMember({"sfharmony", "entropy", "direct_fit"}));
  sub_adapt->add_option("--k", ad.cfg.k);
  sub_adapt->add_option("--epochs", ad.cfg.epochs);
  sub_adapt->add_option("--batch-size", ad.cfg.batch_size);
  sub_adapt->add_option("--lr", ad.cfg.learning_rate);
  sub_adapt->add_option("--patience", ad.cfg.early_stop_patience);
  sub_adapt->add_option("--val-fraction", ad.cfg.val_fraction);
  sub_adapt->add_option("--seed", ad.cfg.seed);
  sub_adapt->add_flag("--no-batch-memory{false}", ad.cfg.batch_memory);
  sub_adapt->add_flag("--warm-start-from-source", ad.cfg.warm_start_from_source);
  sub_adapt->add_option("--em-max-iters", ad.cfg.em.max_iters);
  sub_adapt->add_option("--em-warm-iters", ad.cfg.em.warm_iters);
  sub_adapt->add_option("--em-floor", ad.cfg.em.variance_floor);
  sub_adapt->add_option("--em-tol", ad.cfg.em.loglik_tol);

  struct {
    std::string model, bundle, data, out;
  } in;
  auto* sub_infer = app.add_subcommand("infer", "Predict with adapted features + source head");
  sub_infer->add_option("--model", in.model, "Adapted checkpoint")->required();
  sub_infer->add_option("--bundle", in.bundle, "Source bundle (predictor + stats)")->required();
  sub_infer->add_option("--data", in.data)->required();
  sub_infer->add_option("--out", in.out)->required();

  struct {
    std::string bundle, out;
    std::vector<std::string> sites;  // name:model.sfhb:test.sfds
  } ev;
  auto* sub_eval = app.add_subcommand("eval", "Score adapted models per site");
  sub_eval->add_option("--bundle", ev.bundle)->required();
  sub_eval->add_option("--site", ev.sites, "name:model.sfhb:test.sfds, repeatable")
      ->required();
  sub_eval->add_option("--out", ev.out)->required();

  struct {
    std::string manifest;
  } rn;
  auto* sub_run = app.add_subcommand("run", "Execute a full experiment manifest");
  sub_run->add_option("--manifest", rn.manifest)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sub_gen->parsed()) return cmd_gen(gen);

    if (sub_train->parsed()) {
      sfh::SiteDataset ds = sfh::load_sfds(tr.data);
      const int n_val = static_cast<int>(std::lround(ds.size() * tr.val_fraction));
      sfh::assign_splits(ds, static_cast<int>(ds.size()) - n_val, n_val, 0);
      const sfh::SplitModel model = sfh::train_source(ds, spec_for(ds), tr.cfg);
      save_bundle(weights_bundle(model, ds.task, tr.site), tr.out);
      std::printf("trained %s -> %s\n", tr.data.c_str(), tr.out.c_str());
      return 0;
    }

    if (sub_export->parsed()) {
      if (ex.out.empty() && ex.store.empty())
        throw sfh::Error("export: need --out and/or --store");
      const sfh::StatsBundle in_bundle = load_bundle(ex.model);
      sfh::SiteDataset ds = sfh::load_sfds(ex.data);
      const std::string site = ex.site.empty() ? in_bundle.meta.site_id : ex.site;
      sfh::StatsBundle bundle =
          sfh::export_stats(in_bundle.model, ds, ex.k, ex.em, site);
      if (ex.dp_fraction > 0.0)
        bundle = sfh::apply_dp_noise(bundle, {ex.dp_fraction, ex.dp_seed});
      if (!ex.out.empty()) save_bundle(bundle, ex.out);
      if (!ex.store.empty()) {
        const std::string version = sfh::registry_push(ex.store, bundle);
        std::printf("pushed %s version %s\n", site.c_str(), version.c_str());
      }
      return 0;
    }

    if (sub_adapt->parsed()) {
      sfh::StatsBundle bundle;
      if (!ad.bundle.empty()) bundle = load_bundle(ad.bundle);
      else if (!ad.store.empty() && !ad.site.empty())
        bundle = sfh::registry_pull(ad.store, ad.site, ad.version);
      else throw sfh::Error("adapt: need --bundle or --store with --site");
      const sfh::SiteDataset ds = sfh::load_sfds(ad.data);

      sfh::AdaptResult res;
      if (ad.method == "sfharmony") res = sfh::adapt_target(bundle, ds.inputs, ad.cfg);
      else if (ad.method == "entropy")
        res = sfh::baseline_entropy_min(bundle, ds.inputs, ad.cfg);
      else res = sfh::baseline_direct_fit(bundle, ds.inputs, ad.cfg);

      save_bundle(weights_bundle(res.model, bundle.meta.task, bundle.meta.site_id),
                  ad.out);
      std::printf("adapted over %d epochs, best epoch %d, val loss %.6f -> %s\n",
                  res.epochs_run, res.best_epoch, res.best_val_loss, ad.out.c_str());
      return 0;
    }

    if (sub_infer->parsed()) {
      const sfh::StatsBundle adapted = load_bundle(in.model);
      const sfh::StatsBundle bundle = load_bundle(in.bundle);
      const sfh::SiteDataset ds = sfh::load_sfds(in.data);
      const std::vector<double> preds = sfh::infer(adapted.model, bundle, ds.inputs);
      std::ofstream os(in.out, std::ios::trunc);
      if (!os) throw sfh::Error("cannot write " + in.out);
      os << "index,prediction,label\n";
      char line[96];
      for (std::size_t i = 0; i < preds.size(); ++i) {
        std::snprintf(line, sizeof line, "%zu,%.6f,%.6f\n", i, preds[i], ds.labels[i]);
        os << line;
      }
      std::printf("wrote %zu predictions to %s\n", preds.size(), in.out.c_str());
      return 0;
    }

    if (sub_eval->parsed()) {
      const sfh::StatsBundle bundle = load_bundle(ev.bundle);
      std::vector<std::string> names;
      std::vector<sfh::SplitModel> models, source_models;
      std::vector<sfh::SiteDataset> tests;
      for (const auto& spec : ev.sites) {
        const auto c1 = spec.find(':');
        const auto c2 = spec.find(':', c1 == std::string::npos ? c1 : c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
          throw sfh::Error("eval: --site expects name:model.sfhb:test.sfds");
        names.push_back(spec.substr(0, c1));
        models.push_back(load_bundle(spec.substr(c1 + 1, c2 - c1 - 1)).model);
        tests.push_back(sfh::load_sfds(spec.substr(c2 + 1)));
        source_models.push_back(bundle.model);
      }
      sfh::EmConfig em;
      const sfh::EvalReport source =
          sfh::evaluate(names, source_models, tests, bundle, em);
      const sfh::EvalReport adapted = sfh::evaluate(names, models, tests, bundle, em);
      sfh::write_report(source, adapted, ev.out);
      std::printf("source average %.4f, adapted average %.4f -> %s\n", source.average,
                  adapted.average, ev.out.c_str());
      return 0;
    }

    if (sub_run->parsed()) {
      const sfh::Manifest mf = sfh::parse_manifest(rn.manifest);
      const sfh::ExperimentResult res = sfh::run_experiment(mf);
      std::printf("source average %.4f, adapted average %.4f\n", res.source.average,
                  res.adapted.average);
      std::printf("report written to %s\n", (res.out_dir / "report.txt").c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "sfharmony: error: %s\n", e.what());
    return 1;
  }
  return 2;
}

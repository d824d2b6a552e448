// spackle command-line interface: dataset generation, preprocessing,
// completion training and the corruption-sweep evaluation harness.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spackle/spackle.hpp"

namespace fs = std::filesystem;
using namespace spackle;

namespace {

std::vector<double> parse_rho_list(const std::string& csv) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    std::size_t comma = csv.find(',', start);
    std::string item = csv.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!item.empty()) out.push_back(parse_double(item, "rho list"));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw ValidationError("empty rho list");
  return out;
}

std::string default_run_dir(std::uint64_t seed) {
  auto now = std::chrono::system_clock::now();
  std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", std::gmtime(&tt));
  return "runs/" + std::string(buf) + "-seed" + std::to_string(seed);
}

fs::path make_run_dir(std::string out, std::uint64_t seed) {
  if (out.empty()) out = default_run_dir(seed);
  fs::create_directories(out);
  return out;
}

// The resolved configuration of a subcommand, echoed verbatim into the run
// directory; the file is itself loadable through --config.
void echo_config(const CLI::App& cmd, const fs::path& run_dir) {
  std::ofstream out(run_dir / "config.resolved.ini");
  out << CLI::ConfigINI().to_config(&cmd, true, true, "");
}

Split parse_split(const std::string& s) { return split_from_string(s); }

struct DataArgs {
  std::string data;
  bool zeros_are_missing = false;
};

void add_data_option(CLI::App* cmd, DataArgs& args, bool with_import_flag = false) {
  cmd->add_option("--data", args.data, "Dataset directory")->required();
  if (with_import_flag)
    cmd->add_flag("--zeros-are-missing", args.zeros_are_missing,
                  "Derive the observed mask from counts when observed.tsv is absent");
}

Dataset load_data(const DataArgs& args) {
  LoadOptions opts;
  opts.zeros_are_missing = args.zeros_are_missing;
  return load_dataset(args.data, opts);
}

void print_dataset_summary(const Dataset& ds) {
  std::printf("spots: %lld\ngenes: %lld\nslides:", static_cast<long long>(ds.num_spots()),
              static_cast<long long>(ds.num_genes()));
  for (const auto& id : ds.slide_ids())
    std::printf(" %s(%zu,%s)", id.c_str(), ds.spots_on_slide(id).size(),
                to_string(ds.split.at(id)).c_str());
  std::printf("\nnormalized: %s  genes_selected: %s  completed: %s\n",
              ds.normalization_applied ? "yes" : "no", ds.genes_selected ? "yes" : "no",
              ds.completed ? "yes" : "no");
}

void write_metrics_tsv(const fs::path& path, const std::vector<MetricsRow>& rows) {
  TsvWriter w(path.string());
  w.row({"iteration", "train_mse", "val_mse"});
  for (const auto& r : rows)
    w.row({std::to_string(r.iteration), format_double(r.train_mse), format_double(r.val_mse)});
  w.close();
}

void write_sweep_tsv(const fs::path& path,
                     const std::vector<std::pair<EvalReport, EvalReport>>& pairs) {
  TsvWriter w(path.string());
  w.row({"rho", "method", "mse", "pcc", "n_entries"});
  for (const auto& [model_rep, median_rep] : pairs)
    for (const EvalReport* r : {&model_rep, &median_rep})
      w.row({format_double(r->rho), to_string(r->method), format_double(r->mse),
             format_double(r->pcc), std::to_string(r->num_evaluated_entries)});
  w.close();
}

// Minimal dependency-free SVG line chart of the sweep (rho on x, MSE on y).
void write_sweep_svg(const fs::path& path,
                     const std::vector<std::pair<EvalReport, EvalReport>>& pairs) {
  const double width = 640, height = 420, ml = 70, mr = 20, mt = 30, mb = 50;
  double max_mse = 0, min_rho = 1, max_rho = 0;
  for (const auto& [a, b] : pairs) {
    max_mse = std::max({max_mse, a.mse, b.mse});
    min_rho = std::min(min_rho, a.rho);
    max_rho = std::max(max_rho, a.rho);
  }
  if (max_mse <= 0) max_mse = 1;
  if (max_rho <= min_rho) max_rho = min_rho + 1e-9;
  auto px = [&](double rho) { return ml + (rho - min_rho) / (max_rho - min_rho) * (width - ml - mr); };
  auto py = [&](double mse) { return height - mb - mse / max_mse * (height - mt - mb); };

  std::ofstream out(path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  out << "<line x1='" << ml << "' y1='" << height - mb << "' x2='" << width - mr << "' y2='"
      << height - mb << "' stroke='black'/>\n";
  out << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << height - mb
      << "' stroke='black'/>\n";
  auto series = [&](bool median, const char* color) {
    out << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
    for (const auto& pr : pairs) {
      const EvalReport& r = median ? pr.second : pr.first;
      out << px(r.rho) << "," << py(r.mse) << " ";
    }
    out << "'/>\n";
    for (const auto& pr : pairs) {
      const EvalReport& r = median ? pr.second : pr.first;
      out << "<circle cx='" << px(r.rho) << "' cy='" << py(r.mse) << "' r='3' fill='" << color
          << "'/>\n";
    }
  };
  series(false, "#1f77b4");
  series(true, "#d62728");
  out << "<text x='" << (width / 2) << "' y='" << height - 12
      << "' text-anchor='middle'>masked fraction rho</text>\n";
  out << "<text x='18' y='" << (height / 2) << "' transform='rotate(-90 18 " << (height / 2)
      << ")' text-anchor='middle'>MSE</text>\n";
  out << "<text x='" << width - mr - 6 << "' y='" << mt + 4
      << "' text-anchor='end' fill='#1f77b4'>spackle</text>\n";
  out << "<text x='" << width - mr - 6 << "' y='" << mt + 22
      << "' text-anchor='end' fill='#d62728'>median</text>\n";
  out << "</svg>\n";
}

void print_report(const EvalReport& r) {
  std::printf("%-8s rho=%.3g  mse=%.6g  pcc=%.4f  entries=%lld\n", to_string(r.method), r.rho,
              r.mse, r.pcc, r.num_evaluated_entries);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reference-free completion of corrupted spot expression profiles"};
  app.require_subcommand(1);

  // ---- synth ----------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("synth", "Generate a synthetic hex-grid dataset");
    auto slides = std::make_shared<int>(2);
    auto rows = std::make_shared<int>(30);
    auto cols = std::make_shared<int>(30);
    auto genes = std::make_shared<int>(32);
    auto dropout = std::make_shared<double>(0.3);
    auto smoothness = std::make_shared<double>(8.0);
    auto seed = std::make_shared<std::uint64_t>(0);
    auto out = std::make_shared<std::string>();
    cmd->add_option("--slides", *slides, "Number of slides")->capture_default_str();
    cmd->add_option("--rows", *rows, "Lattice rows per slide")->capture_default_str();
    cmd->add_option("--cols", *cols, "Lattice columns per slide")->capture_default_str();
    cmd->add_option("--genes", *genes, "Gene count")->capture_default_str();
    cmd->add_option("--dropout", *dropout, "Per-entry missing probability")->capture_default_str();
    cmd->add_option("--smoothness", *smoothness, "Field smoothness length (lattice units)")
        ->capture_default_str();
    cmd->add_option("--seed", *seed, "Generator seed")->capture_default_str();
    cmd->add_option("--out", *out, "Output dataset directory")->required();
    cmd->set_config("--config");
    cmd->callback([=]() {
      Dataset ds = generate_synthetic(*slides, *rows, *cols, *genes, *dropout, *smoothness, *seed);
      save_dataset(ds, *out);
      print_dataset_summary(ds);
    });
  }

  // ---- validate -------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("validate", "Validate a dataset directory");
    auto args = std::make_shared<DataArgs>();
    add_data_option(cmd, *args, true);
    cmd->callback([=]() {
      Dataset ds = load_data(*args);
      print_dataset_summary(ds);
      std::printf("ok\n");
    });
  }

  // ---- normalize ------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("normalize", "Apply per-spot log1p TPM normalization");
    auto args = std::make_shared<DataArgs>();
    auto out = std::make_shared<std::string>();
    auto drop = std::make_shared<bool>(false);
    add_data_option(cmd, *args, true);
    cmd->add_option("--out", *out, "Output dataset directory")->required();
    cmd->add_flag("--drop-zero-library-spots", *drop, "Drop spots with no observed counts");
    cmd->callback([=]() {
      NormalizeOptions opts;
      opts.drop_zero_library_spots = *drop;
      Dataset ds = normalize(load_data(*args), opts);
      save_dataset(ds, *out);
      print_dataset_summary(ds);
    });
  }

  // ---- select-genes ---------------------------------------------------
  {
    auto* cmd = app.add_subcommand("select-genes", "Keep the top-k genes by Moran's I");
    auto args = std::make_shared<DataArgs>();
    auto out = std::make_shared<std::string>();
    auto moran_tsv = std::make_shared<std::string>();
    auto k = std::make_shared<int>(32);
    add_data_option(cmd, *args);
    cmd->add_option("--k", *k, "Genes to keep (paper-scale values: 32 or 128)")
        ->capture_default_str();
    cmd->add_option("--out", *out, "Output dataset directory")->required();
    cmd->add_option("--moran-tsv", *moran_tsv, "Also write the full (gene, I) ranking here");
    cmd->callback([=]() {
      Dataset ds = load_data(*args);
      if (!moran_tsv->empty()) {
        auto ranking = moran_ranking(ds);
        TsvWriter w(*moran_tsv);
        w.row({"gene", "morans_i"});
        for (const auto& s : ranking) w.row({s.gene, format_double(s.i_statistic)});
        w.close();
      }
      Dataset selected = select_genes(ds, *k);
      save_dataset(selected, *out);
      print_dataset_summary(selected);
    });
  }

  // ---- median-complete ------------------------------------------------
  {
    auto* cmd = app.add_subcommand("median-complete", "Fill missing entries with ring medians");
    auto args = std::make_shared<DataArgs>();
    auto out = std::make_shared<std::string>();
    auto radius = std::make_shared<int>(4);
    add_data_option(cmd, *args);
    cmd->add_option("--max-radius", *radius, "Largest hop radius to search")->capture_default_str();
    cmd->add_option("--out", *out, "Output dataset directory")->required();
    cmd->callback([=]() {
      auto [ds, prov] = median_complete(load_data(*args), *radius);
      save_dataset(ds, *out);
      save_provenance(prov, ds, *out);
      print_dataset_summary(ds);
    });
  }

  // ---- train ----------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("train", "Train the completion model");
    auto args = std::make_shared<DataArgs>();
    auto out = std::make_shared<std::string>();
    auto mc = std::make_shared<ModelConfig>();
    auto tc = std::make_shared<TrainConfig>();
    auto ffn = std::make_shared<int>(0);
    add_data_option(cmd, *args);
    cmd->add_option("--out", *out, "Run directory (default runs/<timestamp>-seed<seed>)");
    cmd->add_option("--dk", mc->d_k, "Transformer dimension")->capture_default_str();
    cmd->add_option("--layers", mc->num_layers, "Encoder layers")->capture_default_str();
    cmd->add_option("--heads", mc->num_heads, "Attention heads")->capture_default_str();
    cmd->add_option("--ffn", *ffn, "Feed-forward width (default 4*dk)");
    cmd->add_flag("--ring-embedding", mc->ring_embedding, "Learned per-hop-ring embedding");
    cmd->add_option("--batch-size", tc->batch_size, "Spots per batch")->capture_default_str();
    cmd->add_option("--iterations", tc->max_iterations, "Training iterations")->capture_default_str();
    cmd->add_option("--lr", tc->learning_rate, "Adam learning rate")->capture_default_str();
    cmd->add_option("--rho", tc->rho, "Training mask probability")->capture_default_str();
    cmd->add_option("--val-every", tc->val_every, "Validation cadence")->capture_default_str();
    cmd->add_option("--seed", tc->seed, "Run seed")->capture_default_str();
    cmd->add_option("--threads", tc->threads, "Worker threads (0 = all cores)")->capture_default_str();
    cmd->set_config("--config");
    cmd->callback([=, &app]() {
      Dataset ds = load_data(*args);
      CompletionProvenance prov = load_provenance(ds, args->data);
      ModelConfig model = *mc;
      model.ffn_dim = *ffn > 0 ? *ffn : 4 * model.d_k;
      model.num_genes = ds.num_genes();
      fs::path run_dir = make_run_dir(*out, tc->seed);
      echo_config(*app.get_subcommand("train"), run_dir);

      auto started = std::chrono::steady_clock::now();
      TrainResult<float> result = train<float>(ds, prov, model, *tc, [](const MetricsRow& row) {
        std::printf("iter %-6lld  train_mse %-12.6g val_mse %.6g\n", row.iteration, row.train_mse,
                    row.val_mse);
        std::fflush(stdout);
      });
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

      write_metrics_tsv(run_dir / "metrics.tsv", result.metrics);
      save_checkpoint(result.best, run_dir / "checkpoint_best.ckpt");
      save_checkpoint(result.final, run_dir / "checkpoint_final.ckpt");
      std::ofstream md(run_dir / "summary.md");
      md << "# Training run\n\n"
         << "| field | value |\n|---|---|\n"
         << "| spots | " << ds.num_spots() << " |\n"
         << "| genes | " << ds.num_genes() << " |\n"
         << "| iterations | " << tc->max_iterations << " |\n"
         << "| batch size | " << tc->batch_size << " |\n"
         << "| learning rate | " << tc->learning_rate << " |\n"
         << "| rho | " << tc->rho << " |\n"
         << "| seed | " << tc->seed << " |\n"
         << "| best iteration | " << result.best_iteration << " |\n"
         << "| best val MSE | " << result.best.best_val_mse << " |\n"
         << "| wall time (s) | " << secs << " |\n";
      md.close();
      std::printf("best iteration %lld  best val MSE %.6g\nrun dir: %s\n", result.best_iteration,
                  result.best.best_val_mse, run_dir.string().c_str());
    });
  }

  // ---- lr-search ------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("lr-search", "Grid-search the learning rate");
    auto args = std::make_shared<DataArgs>();
    auto out = std::make_shared<std::string>();
    auto mc = std::make_shared<ModelConfig>();
    auto tc = std::make_shared<TrainConfig>();
    auto ffn = std::make_shared<int>(0);
    auto grid_csv = std::make_shared<std::string>("1e-2,1e-3,1e-4,1e-5");
    auto budget = std::make_shared<long long>(1000);
    add_data_option(cmd, *args);
    cmd->add_option("--out", *out, "Run directory");
    cmd->add_option("--grid", *grid_csv, "Comma-separated learning rates")->capture_default_str();
    cmd->add_option("--iterations", *budget, "Budget per grid point")->capture_default_str();
    cmd->add_option("--dk", mc->d_k, "Transformer dimension")->capture_default_str();
    cmd->add_option("--layers", mc->num_layers, "Encoder layers")->capture_default_str();
    cmd->add_option("--heads", mc->num_heads, "Attention heads")->capture_default_str();
    cmd->add_option("--ffn", *ffn, "Feed-forward width (default 4*dk)");
    cmd->add_option("--batch-size", tc->batch_size, "Spots per batch")->capture_default_str();
    cmd->add_option("--rho", tc->rho, "Training mask probability")->capture_default_str();
    cmd->add_option("--val-every", tc->val_every, "Validation cadence")->capture_default_str();
    cmd->add_option("--seed", tc->seed, "Run seed")->capture_default_str();
    cmd->add_option("--threads", tc->threads, "Worker threads")->capture_default_str();
    cmd->set_config("--config");
    cmd->callback([=, &app]() {
      Dataset ds = load_data(*args);
      CompletionProvenance prov = load_provenance(ds, args->data);
      ModelConfig model = *mc;
      model.ffn_dim = *ffn > 0 ? *ffn : 4 * model.d_k;
      model.num_genes = ds.num_genes();
      fs::path run_dir = make_run_dir(*out, tc->seed);
      echo_config(*app.get_subcommand("lr-search"), run_dir);

      auto res = lr_search<float>(ds, prov, model, *tc, parse_rho_list(*grid_csv), *budget);
      TsvWriter w((run_dir / "lr_search.tsv").string());
      w.row({"learning_rate", "val_mse", "diverged"});
      for (const auto& row : res.rows)
        w.row({format_double(row.learning_rate), format_double(row.val_mse),
               row.diverged ? "1" : "0"});
      w.close();
      std::printf("best learning rate: %g\nrun dir: %s\n", res.best_learning_rate,
                  run_dir.string().c_str());
    });
  }

  // ---- complete -------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("complete", "Replace originally-missing values with model output");
    auto args = std::make_shared<DataArgs>();
    auto out = std::make_shared<std::string>();
    auto ckpt_path = std::make_shared<std::string>();
    auto threads = std::make_shared<int>(0);
    add_data_option(cmd, *args);
    cmd->add_option("--checkpoint", *ckpt_path, "Trained checkpoint")->required();
    cmd->add_option("--out", *out, "Output dataset directory")->required();
    cmd->add_option("--threads", *threads, "Worker threads")->capture_default_str();
    cmd->callback([=]() {
      Dataset ds = load_data(*args);
      CompletionProvenance prov = load_provenance(ds, args->data);
      Checkpoint<float> ckpt = load_checkpoint<float>(*ckpt_path);
      auto [completed, new_prov] = model_complete(ckpt, ds, prov, *threads);
      save_dataset(completed, *out);
      save_provenance(new_prov, completed, *out);
      print_dataset_summary(completed);
    });
  }

  // ---- evaluate -------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("evaluate", "Score both methods on synthetic corruption");
    auto args = std::make_shared<DataArgs>();
    auto out = std::make_shared<std::string>();
    auto ckpt_path = std::make_shared<std::string>();
    auto rho = std::make_shared<double>(0.3);
    auto seed = std::make_shared<std::uint64_t>(0);
    auto split = std::make_shared<std::string>("val");
    auto threads = std::make_shared<int>(0);
    add_data_option(cmd, *args);
    cmd->add_option("--checkpoint", *ckpt_path, "Trained checkpoint")->required();
    cmd->add_option("--rho", *rho, "Corruption fraction")->capture_default_str();
    cmd->add_option("--seed", *seed, "Corruption seed")->capture_default_str();
    cmd->add_option("--split", *split, "val or test")->capture_default_str();
    cmd->add_option("--threads", *threads, "Worker threads")->capture_default_str();
    cmd->add_option("--out", *out, "Run directory (optional)");
    cmd->set_config("--config");
    cmd->callback([=, &app]() {
      Dataset ds = load_data(*args);
      CompletionProvenance prov = load_provenance(ds, args->data);
      Checkpoint<float> ckpt = load_checkpoint<float>(*ckpt_path);
      auto pair = evaluate_pair(ckpt, ds, prov, parse_split(*split), *rho, *seed, *threads);
      print_report(pair.first);
      print_report(pair.second);
      if (!out->empty()) {
        fs::path run_dir = make_run_dir(*out, *seed);
        echo_config(*app.get_subcommand("evaluate"), run_dir);
        write_sweep_tsv(run_dir / "eval.tsv", {pair});
      }
    });
  }

  // ---- sweep ----------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("sweep", "Corruption sweep over several rho values");
    auto args = std::make_shared<DataArgs>();
    auto out = std::make_shared<std::string>();
    auto ckpt_path = std::make_shared<std::string>();
    auto rhos_csv = std::make_shared<std::string>("0.1,0.2,0.3,0.4,0.5,0.6,0.7");
    auto seed = std::make_shared<std::uint64_t>(0);
    auto split = std::make_shared<std::string>("val");
    auto threads = std::make_shared<int>(0);
    auto svg = std::make_shared<std::string>();
    add_data_option(cmd, *args);
    cmd->add_option("--checkpoint", *ckpt_path, "Trained checkpoint")->required();
    cmd->add_option("--rhos", *rhos_csv, "Comma-separated corruption fractions")->capture_default_str();
    cmd->add_option("--seed", *seed, "Corruption seed")->capture_default_str();
    cmd->add_option("--split", *split, "val or test")->capture_default_str();
    cmd->add_option("--threads", *threads, "Worker threads")->capture_default_str();
    cmd->add_option("--out", *out, "Run directory");
    cmd->add_option("--svg", *svg, "Also write a minimal SVG line chart to this file");
    cmd->set_config("--config");
    cmd->callback([=, &app]() {
      Dataset ds = load_data(*args);
      CompletionProvenance prov = load_provenance(ds, args->data);
      Checkpoint<float> ckpt = load_checkpoint<float>(*ckpt_path);
      auto pairs =
          corruption_sweep(ckpt, ds, prov, parse_split(*split), parse_rho_list(*rhos_csv), *seed, *threads);
      for (const auto& [a, b] : pairs) {
        print_report(a);
        print_report(b);
      }
      fs::path run_dir = make_run_dir(*out, *seed);
      echo_config(*app.get_subcommand("sweep"), run_dir);
      write_sweep_tsv(run_dir / "sweep.tsv", pairs);
      if (!svg->empty()) write_sweep_svg(*svg, pairs);
      std::printf("run dir: %s\n", run_dir.string().c_str());
    });
  }

  // ---- neighbors ------------------------------------------------------
  {
    auto* cmd = app.add_subcommand("neighbors", "Dump a spot's hex neighborhood (debug)");
    auto args = std::make_shared<DataArgs>();
    auto spot = std::make_shared<long long>(0);
    auto hops = std::make_shared<int>(2);
    add_data_option(cmd, *args, true);
    cmd->add_option("--spot", *spot, "Spot ordinal")->required();
    cmd->add_option("--hops", *hops, "1 or 2")->capture_default_str();
    cmd->callback([=]() {
      Dataset ds = load_data(*args);
      if (*spot < 0 || *spot >= ds.num_spots()) throw ValidationError("spot ordinal out of range");
      const auto& rec = ds.spots[static_cast<std::size_t>(*spot)];
      HexIndex idx = HexIndex::build(ds, rec.slide_id);
      auto ords = hex_neighbors(idx, rec.array_row, rec.array_col, *hops);
      std::printf("center %lld = %s (slide %s, row %d, col %d)\n", *spot, rec.spot_id.c_str(),
                  rec.slide_id.c_str(), rec.array_row, rec.array_col);
      for (Eigen::Index o : ords) {
        const auto& n = ds.spots[static_cast<std::size_t>(o)];
        std::printf("%lld\t%s\trow %d\tcol %d\n", static_cast<long long>(o), n.spot_id.c_str(),
                    n.array_row, n.array_col);
      }
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

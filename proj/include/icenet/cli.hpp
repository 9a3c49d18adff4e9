// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. run_cli() is what main() calls; it never exits the
// process so tests can drive it with captured streams.
#pragma once

#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "icenet/gradient_suite.hpp"
#include "icenet/metrics.hpp"
#include "icenet/service.hpp"
#include "icenet/train.hpp"

namespace icenet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline httplib::Server* active_server = nullptr;

extern "C" inline void stop_active_server(int) {
  if (active_server) active_server->stop();
}

inline std::filesystem::path default_profile_path() {
  return config_from_env().profile_dir / (std::string(kDefaultProfile) + ".tsv");
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Interactive exposure correction: train, enhance, evaluate and serve."};
  app.name("icenet");
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "key=value file overriding defaults; [section] or section.key for subcommands");
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();

  // train
  TrainConfig tc;
  std::string normalization = "min_max";
  std::filesystem::path trace_path;
  auto* train = app.add_subcommand("train", "Train on a directory of images");
  train->add_option("--data", tc.data_dir, "Directory of training images")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out-dir", tc.output_dir, "Checkpoint directory")->capture_default_str();
  train->add_option("--epochs", tc.epochs)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--batch-size", tc.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--lr", tc.learning_rate, "Adam learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  train->add_option("--side", tc.image_side, "Training resolution")->capture_default_str()->check(CLI::Range(32, 4096));
  train->add_option("--checkpoint-interval", tc.checkpoint_interval, "Epochs between checkpoints")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train->add_option("--lambda", tc.objective.target.lambda, "Scribble strength")->capture_default_str();
  train->add_option("--bilateral-gamma", tc.objective.target.gamma)->capture_default_str();
  train->add_option("--window", tc.objective.target.window, "Bilateral window (odd)")->capture_default_str();
  train->add_option("--normalization", normalization)
      ->capture_default_str()
      ->check(CLI::IsMember({"min_max", "divide_by_max"}));
  train->add_option("--w-ent", tc.objective.weights.entropy, "Entropy loss weight")->capture_default_str();
  train->add_option("--w-smo", tc.objective.weights.smoothness, "Smoothness loss weight")->capture_default_str();
  train->add_option("--trace", trace_path, "Write per-step losses as CSV");

  // enhance
  std::filesystem::path ckpt, input, scribbles, output;
  double eta = 0.5;
  auto* enh = app.add_subcommand("enhance", "Enhance one image");
  enh->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  enh->add_option("--input", input, "Input image (PNG or JPEG)")->required()->check(CLI::ExistingFile);
  enh->add_option("--eta", eta, "Exposure level in [0, 1]")->required()->check(CLI::Range(0.0, 1.0));
  enh->add_option("--scribbles", scribbles, "Stroke JSON file")->check(CLI::ExistingFile);
  enh->add_option("--out", output, "Output PNG")->required();

  // eval
  std::filesystem::path pairs, csv_path, profile_store;
  std::string policy = "best";
  auto* ev = app.add_subcommand("eval", "Score a paired dataset with PSNR and SSIM");
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--pairs", pairs, "Directory with input/ and reference/")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--policy", policy, "best: sweep eta; init: initial eta")
      ->capture_default_str()
      ->check(CLI::IsMember({"best", "init"}));
  ev->add_option("--profile", profile_store, "Observation file used by --policy init");
  ev->add_option("--csv", csv_path, "Per-pair CSV (default: standard output)");

  // gradcheck
  GradientSuiteOptions gopt;
  double tolerance = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  gc->add_option("--side", gopt.side, "Image side")->capture_default_str()->check(CLI::Range(4, 256));
  gc->add_option("--coords", gopt.coords_per_block, "Coordinates per parameter block")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  gc->add_option("--step", gopt.step)->capture_default_str()->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", tolerance, "Largest acceptable relative error")->capture_default_str();

  // serve
  ServiceConfig sc = config_from_env();
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  serve->add_option("--port", sc.port)->capture_default_str()->check(CLI::Range(1, 65535));
  serve->add_option("--host", sc.host)->capture_default_str();
  serve->add_option("--threads", sc.threads)->capture_default_str()->check(CLI::PositiveNumber);
  serve->add_option("--ckpt", sc.checkpoint, std::string("Checkpoint (default: $") + kCheckpointEnv + ")");
  serve->add_option("--profile-dir", sc.profile_dir, std::string("Observation files (default: $") + kProfileDirEnv + ")")
      ->capture_default_str();
  serve->add_option("--max-side", sc.max_side)->capture_default_str()->check(CLI::PositiveNumber);

  // personalize
  std::vector<double> record;
  std::filesystem::path store_path = detail::default_profile_path();
  auto* pers = app.add_subcommand("personalize", "Record or inspect exposure preferences");
  pers->add_option("--store", store_path, "Observation file")->capture_default_str();
  auto* mode = pers->add_option_group("mode");
  auto* rec = mode->add_option("--record", record, "Append an observation: mean luminance and eta")->expected(2);
  mode->add_flag("--show", "Print the observations and the fitted preference curve");
  mode->require_option(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion& e) {
    out << "icenet\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\nRun with --help for usage.\n";
    return kExitUsage;
  }

  try {
    if (*train) {
      tc.seed = seed;
      tc.objective.target.normalization =
          normalization == "divide_by_max" ? Normalization::divide_by_max : Normalization::min_max;
      std::ofstream trace;
      if (!trace_path.empty()) {
        trace.open(trace_path);
        if (!trace) throw std::runtime_error("cannot write " + trace_path.string());
        write_trace_header(trace);
      }
      TrainHooks hooks;
      if (trace.is_open()) hooks.on_step = [&](const TraceRow& r) { write_trace_row(trace, r); };
      hooks.on_epoch = [&](std::size_t epoch, double mean) {
        out << "epoch " << epoch << " mean_total " << std::setprecision(8) << mean << '\n' << std::flush;
      };
      hooks.on_checkpoint = [&](const std::filesystem::path& p) { out << "checkpoint " << p.string() << '\n'; };
      icenet::train(tc, hooks, [&](const std::string& m) { err << "warning: " << m << '\n'; });
      return kExitOk;
    }

    if (*enh) {
      const auto model = load_checkpoint(ckpt);
      const RgbImage img = to_rgb(read_image(input));
      StrokeList strokes;
      if (!scribbles.empty()) {
        const auto bytes = read_file_bytes(scribbles);
        strokes = parse_strokes(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
      }
      const Enhancement e = icenet::enhance(model, img, strokes, eta);
      write_file_bytes(output, encode_png(to_image8(e.output)));
      out << std::setprecision(6) << "gamma min " << e.gamma_stats.min << " mean " << e.gamma_stats.mean << " max "
          << e.gamma_stats.max << "\nmean_luma " << e.mean_luma << '\n';
      return kExitOk;
    }

    if (*ev) {
      const auto model = load_checkpoint(ckpt);
      EvalOptions opt;
      opt.policy = policy == "init" ? EtaPolicy::init : EtaPolicy::best;
      ObservationStore store;
      if (!profile_store.empty()) {
        store = ObservationStore::open(profile_store);
        opt.store = &store;
      }
      const auto report = eval_pairs(model, pairs, opt, [&](const std::string& m) { err << "warning: " << m << '\n'; });
      if (csv_path.empty()) {
        write_report_csv(out, report);
      } else {
        std::ofstream csv(csv_path);
        if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
        write_report_csv(csv, report);
      }
      (csv_path.empty() ? err : out) << std::setprecision(6) << "pairs " << report.pairs.size() << " skipped "
                                     << report.skipped.size() << " mean_psnr " << report.mean_psnr << " mean_ssim "
                                     << report.mean_ssim << '\n';
      return kExitOk;
    }

    if (*gc) {
      gopt.seed = seed;
      const auto result = run_gradient_suite(gopt);
      bool ok = true;
      for (const auto& c : result.checks) {
        const bool pass = c.report.max_rel_error < tolerance;
        ok = ok && pass;
        out << std::left << std::setw(6) << loss_term_name(c.term) << " worst_rel_error " << std::scientific
            << std::setprecision(3) << c.report.max_rel_error << std::defaultfloat << " checked " << c.report.checked
            << " skipped " << c.report.skipped_nondifferentiable << (pass ? "" : "  FAIL") << '\n';
      }
      out << "seconds " << std::setprecision(3) << result.seconds << '\n';
      if (!ok) {
        err << "error: a relative error reached " << tolerance << '\n';
        return kExitFailure;
      }
      return kExitOk;
    }

    if (*serve) {
      Service service(sc);
      httplib::Server server;
      detail::active_server = &server;
      std::signal(SIGINT, detail::stop_active_server);
      std::signal(SIGTERM, detail::stop_active_server);
      err << "listening on " << sc.host << ':' << sc.port
          << (service.has_model() ? " with " + sc.checkpoint.string() : std::string(" without a checkpoint")) << '\n';
      const bool ok = run_service(service, server);
      detail::active_server = nullptr;
      if (!ok && !server.is_running()) {
        err << "error: could not listen on " << sc.host << ':' << sc.port << '\n';
        return kExitFailure;
      }
      return kExitOk;
    }

    if (*pers) {
      ObservationStore store = ObservationStore::open(store_path);
      if (*rec) {
        const Observation o{record[0], record[1]};
        validate_observation(o);
        store.append(o);
        out << "m " << store.size() << " active " << (store.personalization_active() ? "true" : "false") << '\n';
        return kExitOk;
      }
      out << "store " << store_path.string() << "\nm " << store.size() << "\nactive "
          << (store.personalization_active() ? "true" : "false") << '\n';
      out << std::setprecision(6);
      for (const auto& o : store.items()) out << "  y " << o.y << " eta " << o.eta << '\n';
      if (store.personalization_active()) {
        const QuadraticFit f = fit_quadratic(store);
        out << "fit a " << f.a << " b " << f.b << " c " << f.c << (f.degenerate ? " (degenerate)" : "")
            << "\nresidual " << fit_residual(f, store.items()) << '\n';
        for (double y : {32.0, 64.0, 96.0, 128.0, 160.0, 192.0, 224.0})
          out << "  eta_init(" << y << ") " << initial_eta(y, store).eta << '\n';
      }
      return kExitOk;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace icenet

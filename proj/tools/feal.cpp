// feal: command-line driver for the federated evidential active-learning
// simulator. Every verb reads the same versioned config file.

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "feal/experiment.hpp"

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed_override;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "experiment config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed-override", c.seed_override, "run this single seed instead of the config's");
}

feal::ExperimentConfig resolve(const Common& c) {
    feal::ExperimentConfig cfg;
    if (!c.config_path.empty()) {
        cfg = feal::load_config(c.config_path);
    }
    if (c.seed_override) {
        cfg.seeds = {*c.seed_override};
    }
    feal::validate_config(cfg);
    return cfg;
}

std::ofstream open_in(const std::filesystem::path& dir, const std::string& name) {
    std::filesystem::create_directories(dir);
    return feal::open_output(dir / name);
}

int cmd_run(const Common& common) {
    const auto cfg = resolve(common);
    const auto result = feal::run_experiment(cfg);
    for (const auto& s : result.seeds) {
        for (const auto& w : s.warnings) {
            std::cerr << "warning: seed " << s.seed << ", " << w << '\n';
        }
        const auto& last = s.metrics.back();
        std::cout << "seed " << s.seed << ": strategy=" << last.strategy
                  << " final_bma=" << feal::detail::fmt_real(last.global_bma)
                  << " final_acc=" << feal::detail::fmt_real(last.global_acc) << '\n';
    }
    std::cout << "wrote " << cfg.output_dir << " (config_hash " << feal::config_hash(cfg) << ")\n";
    return 0;
}

int cmd_ablate(const Common& common, const std::string& axis) {
    const auto cfg = resolve(common);
    const auto res = feal::run_ablation(cfg, feal::parse_axis(axis));
    std::cout << "wrote " << res.rows.size() << " rows to " << cfg.output_dir << "/ablation_" << axis
              << ".csv\n";
    return 0;
}

int cmd_shift(const Common& common) {
    const auto cfg = resolve(common);
    for (auto seed : cfg.seeds) {
        const auto data = feal::make_data(cfg, seed);
        const auto global = feal::train_reference_global(cfg, data, seed);
        const auto m = feal::domain_shift_report(data.partitions, global);
        {
            auto os = open_in(cfg.output_dir, "shift_matrix_seed" + std::to_string(seed) + ".csv");
            feal::write_shift_matrix_csv(os, cfg, m, data.partitions.size());
        }
        auto os = open_in(cfg.output_dir, "kde_seed" + std::to_string(seed) + ".csv");
        feal::write_kde_csv(os, cfg, data.partitions, global);
        std::cout << "seed " << seed << " shift matrix:\n";
        const auto k = data.partitions.size();
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                std::cout << (j ? " " : "  ") << feal::detail::fmt_real(m[i * k + j]);
            }
            std::cout << '\n';
        }
    }
    return 0;
}

int cmd_simplex(const Common& common, const std::vector<double>& alpha, int resolution,
                const std::string& out) {
    const auto cfg = resolve(common);
    std::vector<feal::SimplexPoint> grid;
    if (!alpha.empty()) {
        grid = feal::dirichlet_density_grid(feal::DirichletPosterior(alpha), resolution);
    } else {
        if (cfg.classes != 3 || cfg.task != feal::TaskType::classification) {
            throw std::invalid_argument("simplex-grid needs --alpha or a 3-class classification config");
        }
        const auto seed = cfg.seeds.front();
        const auto data = feal::make_data(cfg, seed);
        const auto global = feal::train_reference_global(cfg, data, seed);
        grid = feal::client_simplex_grid(global, data.partitions.front(), resolution);
    }
    const std::filesystem::path path = out.empty()
        ? std::filesystem::path(cfg.output_dir) / "simplex_grid.csv"
        : std::filesystem::path(out);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto os = feal::open_output(path);
    feal::write_density_grid_csv(os, grid);
    double mass = 0.0;
    for (const auto& p : grid) {
        mass += p.density;
    }
    mass *= feal::simplex_cell_area(resolution);
    std::cout << "wrote " << path.string() << " (" << grid.size() << " cells, mass "
              << feal::detail::fmt_real(mass) << ")\n";
    return 0;
}

int cmd_report(const Common& common, std::string run_dir) {
    if (run_dir.empty()) {
        run_dir = resolve(common).output_dir;
    }
    for (const auto& p : feal::emit_reports(run_dir)) {
        std::cout << "wrote " << p.string() << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated evidential active learning simulator"};
    app.require_subcommand(1);

    Common common;
    auto* run = app.add_subcommand("run", "run the FAL protocol for every seed");
    add_common(run, common);

    std::string axis = "uncertainty_components";
    auto* ablate = app.add_subcommand("ablate", "sweep one ablation axis");
    add_common(ablate, common);
    ablate->add_option("--axis", axis, "uncertainty_components | tau | n | lambda | loss");

    auto* shift = app.add_subcommand("shift-report", "pairwise KS test on energy scores");
    add_common(shift, common);

    std::vector<double> alpha;
    int resolution = 200;
    std::string out;
    auto* simplex = app.add_subcommand("simplex-grid", "Dirichlet density over a 3-class simplex");
    add_common(simplex, common);
    simplex->add_option("--alpha", alpha, "concentration parameters (3 values)")->delimiter(',');
    simplex->add_option("--resolution", resolution, "sub-triangles per edge")->check(CLI::Range(2, 5000));
    simplex->add_option("--out", out, "output CSV path");

    std::string run_dir;
    auto* report = app.add_subcommand("report", "aggregate a finished run directory");
    add_common(report, common);
    report->add_option("--run-dir", run_dir, "run directory (defaults to the config's output_dir)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return cmd_run(common);
        if (*ablate) return cmd_ablate(common, axis);
        if (*shift) return cmd_shift(common);
        if (*simplex) return cmd_simplex(common, alpha, resolution, out);
        if (*report) return cmd_report(common, run_dir);
    } catch (const std::exception& e) {
        std::cerr << "feal: error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}

#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "mwe/experiment.hpp"

int main(int argc, char** argv)
{
    CLI::App app{"Minimum Wasserstein Estimates benchmark runner"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "Run an experiment spec (JSON)");
    std::string spec_path;
    std::string output_dir;
    int threads = 1;
    bool resume = false;
    run->add_option("spec", spec_path, "Experiment spec file")->required()->check(CLI::ExistingFile);
    run->add_option("--output-dir", output_dir, "Override the spec's output directory");
    run->add_option("--threads", threads, "Worker threads over cells")->check(CLI::PositiveNumber);
    run->add_flag("--resume", resume, "Skip cells whose result file already exists");

    auto* report = app.add_subcommand("report", "Print best scores of a finished run");
    std::string report_dir;
    std::string metric = "auc";
    report->add_option("dir", report_dir, "Output directory of a run")->required()->check(CLI::ExistingDirectory);
    report->add_option("--metric", metric, "auc, emd or mse");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            auto spec = mwe::load_experiment_spec(spec_path);
            if (!output_dir.empty()) spec.output_dir = output_dir;
            mwe::RunOptions opts;
            opts.resume = resume;
            opts.threads = threads;
            const auto rep = mwe::run_experiment(spec, opts);
            int errors = 0;
            for (const auto& c : rep.cells) errors += !c.ok;
            std::cout << "cells: " << rep.cells.size() << " (" << errors << " errors)\n"
                      << "results: " << spec.output_dir.string() << '\n';
            for (const char* m : {"auc", "emd"}) {
                std::cout << "best " << m << ":\n";
                mwe::write_best_csv(std::cout, mwe::best_scores(rep, m), m);
            }
        } else {
            const auto rep = mwe::load_report(report_dir);
            mwe::write_best_csv(std::cout, mwe::best_scores(rep, metric), metric);
        }
    } catch (const mwe::ParameterError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

#include <CLI11.hpp>
#include <iostream>
#include <string>

#include "mixedsim/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"mixedsim: analog in-memory inference imperfection simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed_offset = 0;

    const std::vector<std::string> kinds = {"fit",   "tune",  "faults",   "noise",
                                            "thermal", "train", "retention"};
    for (const auto& kind : kinds) {
        CLI::App* sub = app.add_subcommand(kind, "run a '" + kind + "' experiment config");
        sub->add_option("--config", config_path, "path to the JSON experiment config")
            ->required();
        sub->add_option("--seed-offset", seed_offset, "offset added to every seed");
        sub->add_option("--out", out_dir, "output directory (default: current directory)");
    }

    CLI11_PARSE(app, argc, argv);

    const std::string kind = app.get_subcommands().front()->get_name();
    mixedsim::RunResult res = mixedsim::run_experiment(config_path, seed_offset, out_dir, kind);
    if (res.exit_code == 0) {
        for (const auto& f : res.outputs) std::cout << f << "\n";
    } else {
        std::cerr << "error: " << res.message << "\n";
    }
    return res.exit_code;
}

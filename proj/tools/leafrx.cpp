#include <iostream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "leafrx/cli.hpp"

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("leafrx"));
    return leafrx::cli_main({argv + 1, argv + argc}, std::cin, std::cout, std::cerr);
}

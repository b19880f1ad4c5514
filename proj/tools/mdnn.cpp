#include <mdnn/cli.hpp>

int main(int argc, char** argv)
{
    std::vector<std::string> args(argv + 1, argv + argc);
    return mdnn::cli::run(std::move(args));
}

#include <iostream>

#include "ttp/app.hpp"

int main(int argc, char** argv) { return ttp::app::run_cli(argc, argv, std::cout, std::cerr); }

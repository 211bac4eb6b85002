// Stand-in scorer process for protocol tests. Reads one JSON request per line
// on stdin and answers on stdout.
//
//   scorer_stub [mode] [value]
//     const P   answer prob P (default 0.5)
//     range     answer prob 1.2
//     badjson   answer a line that is not JSON
//     wrongid   answer with a different pair_id
//     hang      never answer
//     error     answer {"error": ...}
//     shape     prob = (number of context strings) / 10
//     exit      exit without answering
// count_tokens requests are answered in every mode except hang and exit,
// with the number of whitespace-separated words.

#include <iostream>
#include <sstream>
#include <string>
#include <thread>

#include "json.hpp"

int main(int argc, char** argv) {
    const std::string mode = argc > 1 ? argv[1] : "const";
    const double value = argc > 2 ? std::stod(argv[2]) : 0.5;
    std::string line;
    while (std::getline(std::cin, line)) {
        if (mode == "hang")
            for (;;) std::this_thread::sleep_for(std::chrono::seconds(1));
        if (mode == "exit") return 0;
        nlohmann::json req;
        try {
            req = nlohmann::json::parse(line);
        } catch (const std::exception&) {
            std::cout << R"({"error":"malformed request"})" << std::endl;
            continue;
        }
        if (req.value("op", "") == "count_tokens") {
            std::istringstream words(req.value("text", ""));
            std::size_t n = 0;
            for (std::string w; words >> w;) ++n;
            std::cout << nlohmann::json{{"count", n}}.dump() << std::endl;
            continue;
        }
        nlohmann::json reply{{"pair_id", req.value("pair_id", "")}};
        if (mode == "const") {
            reply["prob"] = value;
        } else if (mode == "range") {
            reply["prob"] = 1.2;
        } else if (mode == "badjson") {
            std::cout << "prob=0.5" << std::endl;
            continue;
        } else if (mode == "wrongid") {
            reply["pair_id"] = "other";
            reply["prob"] = 0.5;
        } else if (mode == "error") {
            std::cout << R"({"error":"model unavailable"})" << std::endl;
            continue;
        } else if (mode == "shape") {
            reply["prob"] = static_cast<double>(req.at("context").size()) / 10.0;
        } else {
            std::cerr << "unknown mode " << mode << '\n';
            return 2;
        }
        std::cout << reply.dump() << std::endl;
    }
    return 0;
}

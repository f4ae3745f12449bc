// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Criteria 6/7/9 share the end-to-end toy runs.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "layoutforge/cli.hpp"
#include "layoutforge/mesh.hpp"
#include "layoutforge/train.hpp"

#include "toy_scene.hpp"

using namespace layoutforge;

namespace {

struct Criterion {
    int number;
    std::string name;
    std::function<bool(std::string&)> body;
};

std::vector<Criterion>& registry() {
    static std::vector<Criterion> r;
    return r;
}

bool run_all() {
    bool all_ok = true;
    for (auto& c : registry()) {
        auto start = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = false;
        try {
            ok = c.body(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("criterion %2d [%s] %-34s (%.1fs)%s%s\n", c.number, ok ? "PASS" : "FAIL",
                    c.name.c_str(), secs, detail.empty() ? "" : " - ", detail.c_str());
        std::fflush(stdout);
        all_ok &= ok;
    }
    return all_ok;
}

}  // namespace

#include "acceptance_criteria.inc"

int main() {
    return run_all() ? 0 : 1;
}

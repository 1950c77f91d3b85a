#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "gdsd/tasks.hpp"

using namespace gdsd;

TEST_CASE("copy_reverse rewards the fraction of reversed matches") {
    const Task task = make_task(TaskId::copy_reverse, 8, 4);
    TokenSequence prompt;
    prompt.tokens = {1, 2, 3, 4};
    prompt.prompt_len = 4;

    const std::vector<int> perfect{4, 3, 2, 1};
    REQUIRE(reward(task, prompt, perfect) == Catch::Approx(1.0));

    const std::vector<int> half{4, 3, 0, 0};
    REQUIRE(reward(task, prompt, half) == Catch::Approx(0.5));

    const std::vector<int> none{5, 5, 5, 5};
    REQUIRE(reward(task, prompt, none) == Catch::Approx(0.0));
}

TEST_CASE("copy_reverse prompts are inside the vocabulary and deterministic per seed") {
    const Task task = make_task(TaskId::copy_reverse, 8, 8);
    RngStream a(42);
    RngStream b(42);
    const TokenSequence pa = sample_prompt(task, a);
    const TokenSequence pb = sample_prompt(task, b);
    REQUIRE(pa.tokens == pb.tokens);
    REQUIRE(pa.length() == 8);
    pa.validate(task.vocab);
}

TEST_CASE("mini_countdown prompts encode a reachable target") {
    const Task task = make_task(TaskId::mini_countdown);
    RngStream rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const TokenSequence p = sample_prompt(task, rng);
        REQUIRE(p.length() == 4);
        for (int tok : p.tokens) {
            REQUIRE(tok >= 0);
            REQUIRE(tok <= 8);  // all prompt slots are digits
        }
        // the target is reachable with some sign assignment of the given numbers
        const int a = p.tokens[0] + 1;
        const int b = p.tokens[1] + 1;
        const int c = p.tokens[2] + 1;
        const int target = p.tokens[3] + 1;
        bool reachable = false;
        for (int s1 : {1, -1}) {
            for (int s2 : {1, -1}) {
                reachable = reachable || a + s1 * b + s2 * c == target;
            }
        }
        REQUIRE(reachable);
    }
}

TEST_CASE("mini_countdown scores the exact ladder") {
    const Task task = make_task(TaskId::mini_countdown);
    TokenSequence prompt;
    prompt.tokens = {2, 4, 1, 5};  // numbers 3, 5, 2; target 6
    prompt.prompt_len = 4;

    using namespace countdown;
    SECTION("exact value with the exact numbers gives 1.0") {
        const std::vector<int> c{2, kPlus, 4, kMinus, 1};  // 3 + 5 - 2 = 6
        REQUIRE(reward(task, prompt, c) == Catch::Approx(1.0));
    }
    SECTION("correct numbers but the wrong value gives 0.1") {
        const std::vector<int> c{2, kMinus, 4, kMinus, 1};  // 3 - 5 - 2 = -4
        REQUIRE(reward(task, prompt, c) == Catch::Approx(0.1));
    }
    SECTION("wrong numbers give 0.0 even when well formed") {
        const std::vector<int> c{0, kPlus, 4, kMinus, 1};  // numbers 1, 5, 2
        REQUIRE(reward(task, prompt, c) == Catch::Approx(0.0));
    }
    SECTION("malformed slots give 0.0 and never throw") {
        const std::vector<int> ops_everywhere{kPlus, kPlus, kPlus, kPlus, kPlus};
        REQUIRE(reward(task, prompt, ops_everywhere) == Catch::Approx(0.0));
        const std::vector<int> digits_everywhere{1, 1, 1, 1, 1};
        REQUIRE(reward(task, prompt, digits_everywhere) == Catch::Approx(0.0));
    }
}

TEST_CASE("mini_sudoku prompts have the requested empty cells and a unique solution") {
    const Task task = make_task(TaskId::mini_sudoku, 0, 0, 4);
    RngStream rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const TokenSequence p = sample_prompt(task, rng);
        REQUIRE(p.length() == 16);
        int empties = 0;
        std::array<int, sudoku::kCells> grid;
        for (int i = 0; i < 16; ++i) {
            const int tok = p.tokens[static_cast<size_t>(i)];
            grid[static_cast<size_t>(i)] = tok == sudoku::kBlank ? -1 : tok;
            empties += tok == sudoku::kBlank ? 1 : 0;
        }
        REQUIRE(empties == 4);
        REQUIRE(sudoku::count_solutions(grid, 2, nullptr) == 1);
    }
}

TEST_CASE("mini_sudoku rewards the fraction of correctly filled cells") {
    const Task task = make_task(TaskId::mini_sudoku, 0, 0, 4);
    RngStream rng(13);
    const TokenSequence p = sample_prompt(task, rng);
    std::array<int, sudoku::kCells> grid;
    for (int i = 0; i < 16; ++i) {
        const int tok = p.tokens[static_cast<size_t>(i)];
        grid[static_cast<size_t>(i)] = tok == sudoku::kBlank ? -1 : tok;
    }
    std::array<int, sudoku::kCells> solution{};
    REQUIRE(sudoku::count_solutions(grid, 2, &solution) == 1);

    std::vector<int> correct;
    for (int i = 0; i < 16; ++i) {
        if (grid[static_cast<size_t>(i)] < 0) {
            correct.push_back(solution[static_cast<size_t>(i)]);
        }
    }
    REQUIRE(reward(task, p, correct) == Catch::Approx(1.0));

    std::vector<int> two_wrong = correct;
    two_wrong[0] = (two_wrong[0] + 1) % 4;
    two_wrong[1] = (two_wrong[1] + 1) % 4;
    REQUIRE(reward(task, p, two_wrong) == Catch::Approx(0.5));

    const std::vector<int> blanks(4, sudoku::kBlank);
    REQUIRE(reward(task, p, blanks) == Catch::Approx(0.0));
}

TEST_CASE("rewards are pure and bounded") {
    RngStream rng(17);
    for (TaskId id : {TaskId::copy_reverse, TaskId::mini_countdown, TaskId::mini_sudoku}) {
        const Task task = make_task(id);
        RngStream sub = rng.substream(static_cast<uint64_t>(id));
        const TokenSequence p = sample_prompt(task, sub);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<int> completion(static_cast<size_t>(task.completion_len));
            for (int& tok : completion) {
                tok = sub.next_int(task.vocab.size);
            }
            const double r1 = reward(task, p, completion);
            const double r2 = reward(task, p, completion);
            REQUIRE(r1 == r2);
            REQUIRE(r1 >= 0.0);
            REQUIRE(r1 <= task.r_max);
        }
    }
}

TEST_CASE("seeded prompts replay exactly") {
    for (TaskId id : {TaskId::copy_reverse, TaskId::mini_countdown, TaskId::mini_sudoku}) {
        const Task task = make_task(id);
        for (uint64_t seed : {1ull, 99ull}) {
            RngStream a(seed);
            RngStream b(seed);
            REQUIRE(sample_prompt(task, a).tokens == sample_prompt(task, b).tokens);
        }
    }
}

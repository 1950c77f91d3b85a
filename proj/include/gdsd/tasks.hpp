#pragma once

#include <algorithm>
#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include "gdsd/mdm.hpp"
#include "gdsd/rng.hpp"

namespace gdsd {

enum class TaskId { copy_reverse, mini_countdown, mini_sudoku };

inline const char* to_string(TaskId id) {
    switch (id) {
        case TaskId::copy_reverse: return "copy_reverse";
        case TaskId::mini_countdown: return "mini_countdown";
        case TaskId::mini_sudoku: return "mini_sudoku";
    }
    return "?";
}

inline TaskId task_id_from_string(const std::string& s) {
    if (s == "copy_reverse") {
        return TaskId::copy_reverse;
    }
    if (s == "mini_countdown") {
        return TaskId::mini_countdown;
    }
    if (s == "mini_sudoku") {
        return TaskId::mini_sudoku;
    }
    throw std::invalid_argument("unknown task id '" + s + "'");
}

// Verifiable-reward environment sized for toy models. Rewards are deterministic
// pure functions of (prompt, completion), bounded in [0, 1], and reach 1 exactly
// on solutions.
struct Task {
    TaskId id = TaskId::copy_reverse;
    Vocabulary vocab;
    int prompt_len = 0;
    int completion_len = 0;
    int sudoku_empty_cells = 6;  // mini_sudoku only
    double r_max = 1.0;
};

namespace countdown {

constexpr int kPlus = 9;   // digits 1..9 occupy ids 0..8
constexpr int kMinus = 10;

inline bool is_digit(int tok) { return tok >= 0 && tok <= 8; }
inline bool is_op(int tok) { return tok == kPlus || tok == kMinus; }
inline int digit_value(int tok) { return tok + 1; }

}  // namespace countdown

namespace sudoku {

constexpr int kSide = 4;
constexpr int kCells = 16;
constexpr int kBlank = 4;  // digits 1..4 occupy ids 0..3

inline bool cell_ok(const std::array<int, kCells>& grid, int cell, int digit) {
    const int row = cell / kSide;
    const int col = cell % kSide;
    for (int i = 0; i < kSide; ++i) {
        if (grid[static_cast<size_t>(row * kSide + i)] == digit && row * kSide + i != cell) {
            return false;
        }
        if (grid[static_cast<size_t>(i * kSide + col)] == digit && i * kSide + col != cell) {
            return false;
        }
    }
    const int br = (row / 2) * 2;
    const int bc = (col / 2) * 2;
    for (int r = br; r < br + 2; ++r) {
        for (int c = bc; c < bc + 2; ++c) {
            if (grid[static_cast<size_t>(r * kSide + c)] == digit && r * kSide + c != cell) {
                return false;
            }
        }
    }
    return true;
}

// Count completions of the grid up to `limit`; fills `solution` with the first
// one found (candidates tried in ascending digit order, so the first solution is
// canonical and deterministic).
inline int count_solutions(std::array<int, kCells> grid, int limit,
                           std::array<int, kCells>* solution) {
    int cell = -1;
    for (int i = 0; i < kCells; ++i) {
        if (grid[static_cast<size_t>(i)] < 0) {
            cell = i;
            break;
        }
    }
    if (cell < 0) {
        if (solution != nullptr) {
            *solution = grid;
        }
        return 1;
    }
    int found = 0;
    for (int d = 0; d < kSide; ++d) {
        grid[static_cast<size_t>(cell)] = d;
        if (cell_ok(grid, cell, d)) {
            found += count_solutions(grid, limit - found,
                                     found == 0 ? solution : nullptr);
            if (found >= limit) {
                return found;
            }
        }
        grid[static_cast<size_t>(cell)] = -1;
    }
    return found;
}

inline std::array<int, kCells> random_solution(RngStream& rng) {
    std::array<int, kCells> grid;
    grid.fill(-1);
    const auto fill = [&](auto&& self, int cell) -> bool {
        if (cell == kCells) {
            return true;
        }
        std::vector<int> digits{0, 1, 2, 3};
        for (size_t i = digits.size(); i > 1; --i) {
            std::swap(digits[i - 1], digits[static_cast<size_t>(rng.next_int(static_cast<int>(i)))]);
        }
        for (int d : digits) {
            grid[static_cast<size_t>(cell)] = d;
            if (cell_ok(grid, cell, d) && self(self, cell + 1)) {
                return true;
            }
            grid[static_cast<size_t>(cell)] = -1;
        }
        return false;
    };
    fill(fill, 0);
    return grid;
}

}  // namespace sudoku

inline Task make_task(TaskId id, int vocab_size = 0, int length = 0, int sudoku_empty_cells = 6) {
    Task task;
    task.id = id;
    switch (id) {
        case TaskId::copy_reverse: {
            task.vocab = Vocabulary{vocab_size > 0 ? vocab_size : 8};
            task.prompt_len = length > 0 ? length : 8;
            task.completion_len = task.prompt_len;
            break;
        }
        case TaskId::mini_countdown: {
            task.vocab = Vocabulary{11};  // digits 1..9, '+', '-'
            task.prompt_len = 4;          // three operands and the target
            task.completion_len = 5;      // d op d op d, fixed positions
            break;
        }
        case TaskId::mini_sudoku: {
            if (sudoku_empty_cells < 4 || sudoku_empty_cells > 10) {
                throw std::invalid_argument("make_task: sudoku empty cells must lie in [4, 10]");
            }
            task.vocab = Vocabulary{5};  // digits 1..4 plus the blank marker
            task.prompt_len = sudoku::kCells;
            task.completion_len = sudoku_empty_cells;
            task.sudoku_empty_cells = sudoku_empty_cells;
            break;
        }
    }
    return task;
}

inline TokenSequence sample_prompt(const Task& task, RngStream& rng) {
    TokenSequence prompt;
    switch (task.id) {
        case TaskId::copy_reverse: {
            for (int i = 0; i < task.prompt_len; ++i) {
                prompt.tokens.push_back(rng.next_int(task.vocab.size));
            }
            break;
        }
        case TaskId::mini_countdown: {
            for (;;) {
                const int a = 1 + rng.next_int(9);
                const int b = 1 + rng.next_int(9);
                const int c = 1 + rng.next_int(9);
                const int s1 = rng.next_int(2) == 0 ? 1 : -1;
                const int s2 = rng.next_int(2) == 0 ? 1 : -1;
                const int target = a + s1 * b + s2 * c;
                if (target < 1 || target > 9) {
                    continue;
                }
                prompt.tokens = {a - 1, b - 1, c - 1, target - 1};
                break;
            }
            break;
        }
        case TaskId::mini_sudoku: {
            const std::array<int, sudoku::kCells> solution = sudoku::random_solution(rng);
            std::array<int, sudoku::kCells> puzzle = solution;
            std::vector<int> order(sudoku::kCells);
            for (int i = 0; i < sudoku::kCells; ++i) {
                order[static_cast<size_t>(i)] = i;
            }
            for (size_t i = order.size(); i > 1; --i) {
                std::swap(order[i - 1], order[static_cast<size_t>(rng.next_int(static_cast<int>(i)))]);
            }
            int removed = 0;
            for (int cell : order) {
                if (removed == task.sudoku_empty_cells) {
                    break;
                }
                const int saved = puzzle[static_cast<size_t>(cell)];
                puzzle[static_cast<size_t>(cell)] = -1;
                if (sudoku::count_solutions(puzzle, 2, nullptr) == 1) {
                    ++removed;
                } else {
                    puzzle[static_cast<size_t>(cell)] = saved;
                }
            }
            if (removed != task.sudoku_empty_cells) {
                // this seed's grid resists unique removal; fall back to a new grid
                return sample_prompt(task, rng);
            }
            for (int i = 0; i < sudoku::kCells; ++i) {
                prompt.tokens.push_back(puzzle[static_cast<size_t>(i)] < 0
                                            ? sudoku::kBlank
                                            : puzzle[static_cast<size_t>(i)]);
            }
            break;
        }
    }
    prompt.prompt_len = prompt.length();
    return prompt;
}

// Malformed completions score, they never throw.
inline double reward(const Task& task, const TokenSequence& prompt,
                     std::span<const int> completion) {
    if (static_cast<int>(completion.size()) != task.completion_len) {
        return 0.0;
    }
    switch (task.id) {
        case TaskId::copy_reverse: {
            int hits = 0;
            for (int j = 0; j < task.completion_len; ++j) {
                if (completion[static_cast<size_t>(j)] ==
                    prompt.tokens[static_cast<size_t>(task.prompt_len - 1 - j)]) {
                    ++hits;
                }
            }
            return static_cast<double>(hits) / task.completion_len;
        }
        case TaskId::mini_countdown: {
            using namespace countdown;
            const bool well_formed = is_digit(completion[0]) && is_op(completion[1]) &&
                                     is_digit(completion[2]) && is_op(completion[3]) &&
                                     is_digit(completion[4]);
            if (!well_formed) {
                return 0.0;
            }
            std::array<int, 3> used{digit_value(completion[0]), digit_value(completion[2]),
                                    digit_value(completion[4])};
            std::array<int, 3> given{digit_value(prompt.tokens[0]), digit_value(prompt.tokens[1]),
                                     digit_value(prompt.tokens[2])};
            std::sort(used.begin(), used.end());
            std::sort(given.begin(), given.end());
            if (used != given) {
                return 0.0;
            }
            int value = digit_value(completion[0]);
            value += (completion[1] == kPlus ? 1 : -1) * digit_value(completion[2]);
            value += (completion[3] == kPlus ? 1 : -1) * digit_value(completion[4]);
            const int target = digit_value(prompt.tokens[3]);
            return value == target ? 1.0 : 0.1;
        }
        case TaskId::mini_sudoku: {
            std::array<int, sudoku::kCells> puzzle;
            for (int i = 0; i < sudoku::kCells; ++i) {
                const int tok = prompt.tokens[static_cast<size_t>(i)];
                puzzle[static_cast<size_t>(i)] = tok == sudoku::kBlank ? -1 : tok;
            }
            std::array<int, sudoku::kCells> solution;
            if (sudoku::count_solutions(puzzle, 2, &solution) != 1) {
                return 0.0;  // not a valid puzzle; generated prompts are always unique
            }
            int correct = 0;
            int empties = 0;
            size_t j = 0;
            for (int i = 0; i < sudoku::kCells && j < completion.size(); ++i) {
                if (puzzle[static_cast<size_t>(i)] < 0) {
                    ++empties;
                    if (completion[j] == solution[static_cast<size_t>(i)]) {
                        ++correct;
                    }
                    ++j;
                }
            }
            return empties == 0 ? 0.0 : static_cast<double>(correct) / empties;
        }
    }
    return 0.0;
}

inline double reward(const Task& task, const TokenSequence& sequence) {
    return reward(task, TokenSequence{{sequence.tokens.begin(),
                                       sequence.tokens.begin() + sequence.prompt_len},
                                      sequence.prompt_len},
                  std::span<const int>(sequence.tokens).subspan(
                      static_cast<size_t>(sequence.prompt_len)));
}

}  // namespace gdsd

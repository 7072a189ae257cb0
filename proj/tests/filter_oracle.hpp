#pragma once

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "fds/filter.hpp"

namespace fds::testing {

// Reference selection by repeated arg-max over the cell, without sorting.
inline filter::CellVerdict brute_force_cell(const std::vector<filter::PredictionRecord>& cell, int n_l, bool reject) {
  filter::CellVerdict v;
  std::vector<bool> taken(cell.size(), false);
  for (const auto& r : cell)
    if (r.correct) v.correct_ids.push_back(r.generation_id);
  for (int round = 0; round < n_l; ++round) {
    int best = -1;
    for (std::size_t i = 0; i < cell.size(); ++i) {
      if (taken[i] || (reject && !cell[i].correct)) continue;
      if (best < 0) {
        best = static_cast<int>(i);
        continue;
      }
      const auto& b = cell[static_cast<std::size_t>(best)];
      if (cell[i].entropy > b.entropy || (cell[i].entropy == b.entropy && cell[i].generation_id < b.generation_id))
        best = static_cast<int>(i);
    }
    if (best < 0) break;
    taken[static_cast<std::size_t>(best)] = true;
    v.selected_ids.push_back(cell[static_cast<std::size_t>(best)].generation_id);
  }
  for (std::size_t i = 0; i < cell.size(); ++i) {
    if (taken[i]) continue;
    (cell[i].correct ? v.rejected_low_entropy_ids : v.rejected_semantic_ids).push_back(cell[i].generation_id);
  }
  return v;
}

inline bool same_set(std::vector<std::uint64_t> a, std::vector<std::uint64_t> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return a == b;
}

struct OracleReport {
  int cells = 0;
  int mismatches = 0;
};

// Random pools of cells of size <= 20 with heavy entropy ties; every cell of
// select() and filter_ablation_mode(entropy_only) must equal the brute force.
inline OracleReport run_filter_oracle(int n_cells, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> size(1, 20), nl(1, 24), tie(0, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  OracleReport rep;
  std::uint64_t counter = 0;
  while (rep.cells < n_cells) {
    const int cells_here = std::min(8, n_cells - rep.cells);
    mixing::SamplePool pool;
    std::vector<filter::PredictionRecord> records;
    for (int c = 0; c < cells_here; ++c) {
      const int n = size(rng);
      for (int r = 0; r < n; ++r) {
        mixing::SyntheticSample s;
        s.domain_i = c / 4;
        s.domain_j = c / 4 + 1 + c % 2;
        s.class_id = c % 4 / 2;
        s.generation_id = counter++ * 7919 % 1000003;  // unique, not in cell order
        pool.entries.push_back(s);
        filter::PredictionRecord p;
        p.generation_id = s.generation_id;
        p.entropy = tie(rng) == 0 ? u(rng) : 0.25 * tie(rng);
        p.correct = u(rng) < 0.6;
        records.push_back(p);
      }
    }
    const int n_l = nl(rng);
    const auto sel = filter::select(records, pool, n_l);
    const auto ent = filter::filter_ablation_mode(records, pool, n_l, filter::FilterMode::entropy_only);
    std::map<mixing::CellKey, std::vector<filter::PredictionRecord>> cells;
    for (std::size_t i = 0; i < pool.entries.size(); ++i) {
      const auto& e = pool.entries[i];
      cells[{e.domain_i, e.domain_j, e.class_id}].push_back(records[i]);
    }
    for (const auto& [key, cell] : cells) {
      ++rep.cells;
      const auto want_sel = brute_force_cell(cell, n_l, true);
      const auto want_ent = brute_force_cell(cell, n_l, false);
      const auto& got_sel = sel.cells.at(key);
      const auto& got_ent = ent.cells.at(key);
      const bool ok = got_sel.selected_ids == want_sel.selected_ids && same_set(got_sel.correct_ids, want_sel.correct_ids) &&
                      same_set(got_sel.rejected_semantic_ids, want_sel.rejected_semantic_ids) &&
                      same_set(got_sel.rejected_low_entropy_ids, want_sel.rejected_low_entropy_ids) &&
                      got_ent.selected_ids == want_ent.selected_ids &&
                      same_set(got_ent.rejected_semantic_ids, want_ent.rejected_semantic_ids) &&
                      same_set(got_ent.rejected_low_entropy_ids, want_ent.rejected_low_entropy_ids);
      if (!ok) ++rep.mismatches;
    }
  }
  return rep;
}

}  // namespace fds::testing

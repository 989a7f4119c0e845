#pragma once

#include <string>
#include <vector>

#include "cdj/losses.hpp"
#include "cdj/probes.hpp"
#include "cdj/table.hpp"
#include "cdj/trainer.hpp"

// Table builders for every exported artifact. Wall-clock timings stay out
// of these tables on purpose: a rerun with the same seed must produce
// byte-identical files.
namespace cdj {

inline Table report_table(const TrainingReport& report) {
  Table t;
  t.columns = {"epoch", "total", "softmax"};
  if (!report.epochs.empty()) {
    for (const LossBreakdown::LayerTerm& term :
         report.epochs.front().mean_loss.layer_terms) {
      t.columns.push_back("routing_l" + std::to_string(term.layer));
      t.columns.push_back("balancing_l" + std::to_string(term.layer));
    }
    t.columns.push_back("train_acc");
    t.columns.push_back("test_acc");
    for (const probes::LayerEntropy& e : report.epochs.front().entropy) {
      t.columns.push_back("entropy_l" + std::to_string(e.layer_index));
    }
  } else {
    t.columns.push_back("train_acc");
    t.columns.push_back("test_acc");
  }
  for (const EpochStats& s : report.epochs) {
    std::vector<std::string> row;
    row.push_back(std::to_string(s.epoch));
    row.push_back(format_real(s.mean_loss.total));
    row.push_back(format_real(s.mean_loss.training_cost));
    for (const LossBreakdown::LayerTerm& term : s.mean_loss.layer_terms) {
      row.push_back(format_real(term.routing));
      row.push_back(format_real(term.balancing));
    }
    row.push_back(format_real(s.train_accuracy));
    row.push_back(format_real(s.test_accuracy));
    for (const probes::LayerEntropy& e : s.entropy) {
      row.push_back(e.average_entropy ? format_real(*e.average_entropy) : "-");
    }
    t.add_row(std::move(row));
  }
  return t;
}

inline Table entropy_table(const std::vector<probes::LayerEntropy>& profile) {
  Table t;
  t.columns = {"layer", "avg_entropy", "live_nodes", "dead_nodes"};
  for (const probes::LayerEntropy& e : profile) {
    t.add_row({std::to_string(e.layer_index),
               e.average_entropy ? format_real(*e.average_entropy) : "-",
               std::to_string(e.live_nodes), std::to_string(e.dead_nodes)});
  }
  return t;
}

/// Raw class-activation matrix: header names the node indices, one row per
/// class.
inline Table cmatrix_table(const ClassActivationMatrix& cmat) {
  Table t;
  t.comments.push_back("layer=" + std::to_string(cmat.layer_index) +
                       " batch=" + std::to_string(cmat.batch_size));
  t.columns = {"class"};
  for (std::size_t j = 0; j < cmat.num_nodes(); ++j) {
    t.columns.push_back("n" + std::to_string(j));
  }
  for (std::size_t h = 0; h < cmat.num_classes(); ++h) {
    std::vector<std::string> row{std::to_string(h)};
    for (std::size_t j = 0; j < cmat.num_nodes(); ++j) {
      row.push_back(format_real(cmat.values(h, j)));
    }
    t.add_row(std::move(row));
  }
  return t;
}

/// Column-normalized purity snapshot; dead nodes are listed in a comment
/// and left as zero columns.
inline Table snapshot_table(const probes::PuritySnapshot& snap) {
  Table t;
  t.comments.push_back("layer=" + std::to_string(snap.layer_index));
  std::string dead;
  for (std::size_t j = 0; j < snap.zero_mass.size(); ++j) {
    if (snap.zero_mass[j]) dead += (dead.empty() ? "" : ",") + std::to_string(j);
  }
  t.comments.push_back("dead_nodes=" + (dead.empty() ? "none" : dead));
  t.columns = {"class"};
  for (std::size_t j = 0; j < snap.zero_mass.size(); ++j) {
    t.columns.push_back("n" + std::to_string(j));
  }
  for (std::size_t h = 0; h < snap.normalized.dim(0); ++h) {
    std::vector<std::string> row{std::to_string(h)};
    for (std::size_t j = 0; j < snap.normalized.dim(1); ++j) {
      row.push_back(format_real(snap.normalized(h, j)));
    }
    t.add_row(std::move(row));
  }
  return t;
}

}  // namespace cdj

#pragma once

// Subcommands behind the CLI. Each reads a resolved RunConfig, writes its artifacts
// under config.out_dir(), prints a short report to `out` and throws an e2emil::Error
// whose code is the exit status.
//
// Files written:
//   gen-data            dataset.bin, dataset_summary.json, config.txt
//   train               config.txt, history.csv, epochs.csv, summary.json, train.log,
//                       checkpoint_initial.bin, checkpoint_best.bin, checkpoint_final.bin
//   verify-equivalence  config.txt, equivalence_N<n>.csv, equivalence.json
//   gradcheck           config.txt, gradcheck.json
//   sweep-k             config.txt, sweep_k.csv, sweep_k_runs.csv
//   report              report.csv (only when out is set explicitly)
//
// CSV columns:
//   history.csv         epoch,step,slide_id,loss,lr
//   epochs.csv          epoch,steps,mean_loss,val_auc,ci_lo,ci_hi
//   sweep_k.csv         k,seeds,median_final_loss,min_final_loss,max_final_loss,
//                       median_best_auc,median_ci_lo,median_ci_hi
//   sweep_k_runs.csv    k,seed,final_loss,best_auc,best_epoch,ci_lo,ci_hi
//   report.csv          run,mode,encoders,tiles_per_rank,final_loss,best_auc,ci_lo,ci_hi

#include <filesystem>
#include <ostream>
#include <span>
#include <string>

#include "e2emil/config.hpp"

namespace e2emil {

/// Applies E2EMIL_LOG (trace, debug, info, warn, error, off) to the default logger.
void configure_logging();

void cmd_gen_data(const RunConfig& config, std::ostream& out);
void cmd_train(const RunConfig& config, std::ostream& out);
void cmd_verify_equivalence(const RunConfig& config, std::ostream& out);
void cmd_gradcheck(const RunConfig& config, std::ostream& out);
void cmd_sweep_k(const RunConfig& config, std::ostream& out);
/// write_csv: also write report.csv under config.out_dir().
void cmd_report(std::span<const std::filesystem::path> run_dirs, const RunConfig& config, bool write_csv,
                std::ostream& out);

}  // namespace e2emil

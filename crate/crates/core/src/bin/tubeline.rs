use std::process::ExitCode;

use tubeline::cli::{self, CliError};

fn main() -> ExitCode {
    let cfg = match cli::parse_args(std::env::args_os()) {
        Ok(cfg) => cfg,
        Err(CliError::Usage(e)) => e.exit(),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match cli::execute(&cfg) {
        Ok(report) => {
            for row in &report.rows {
                eprintln!(
                    "threads={} window={} clusters={} events={} seconds={:.3} events/s={:.1}",
                    row.threads,
                    row.window,
                    row.clusters,
                    row.metrics.events_processed,
                    row.metrics.wall_seconds,
                    row.metrics.throughput
                );
            }
            if cfg.sweep.is_empty() {
                eprintln!(
                    "{} detections, {} anomalies",
                    report.detections, report.anomalies
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

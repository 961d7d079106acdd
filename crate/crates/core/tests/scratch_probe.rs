//! Temporary diagnostic (not part of the suite): per-token comparison of
//! sequential vs parallel fixed points on a trained checkpoint.

use fprnn_core::fixed_point::RESIDUAL_TINY;
use fprnn_core::harness::{self, ExperimentConfig};

#[test]
#[ignore]
fn probe_seq_vs_parallel_tokens() {
    let dir = std::env::var("PROBE_DIR").unwrap_or_else(|_| "/tmp/exp-s3-hh2".into());
    let text = std::fs::read_to_string(format!("{dir}/config.json")).unwrap();
    let cfg: ExperimentConfig = serde_json::from_str(&text).unwrap();
    let cfgn = cfg.normalized().unwrap();
    let model = harness::load_model(&cfgn, &cfgn.checkpoint_path()).unwrap();

    let len = 16;
    let batch = cfgn.task.eval_batch_at(len, 4, 99).unwrap();
    let fp = cfgn.fp_eval;
    let par = model.forward_solve(&batch.tokens, &fp, 0, None).unwrap();
    for (b, seq) in batch.tokens.iter().enumerate() {
        let sq = model.sequential_forward(seq, &fp).unwrap();
        print!("seq {b}: ");
        for (t, y_seq) in sq.layer_y[0].iter().enumerate() {
            let y_par = par.layer_solves[0].y_star[b][t].as_vec();
            let mut inc = 0.0f64;
            let mut scale = 0.0f64;
            for (a, p) in y_seq.data.iter().zip(y_par.data.iter()) {
                inc = inc.max((a - p).abs());
                scale = scale.max(p.abs());
            }
            print!("{:.3} ", inc / scale.max(RESIDUAL_TINY));
            let _ = t;
        }
        println!(
            "  [ell*_par {} converged {}]",
            par.layer_solves[0].ell_star[b], par.layer_solves[0].converged[b]
        );
    }
}

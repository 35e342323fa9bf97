//! The proxy-gradient toolkit: closed forms, the count-weighted negative
//! mass sum_y, the relative penalty and its sharpening as tau shrinks, and
//! the effect of per-class sample counts on gradient magnitudes.

use hpcr::gradients::{grad_pcr_closed_form, grad_softmax_closed_form, relative_penalty, sum_y};
use hpcr::losses::BatchClassCounts;
use hpcr::model::softmax_prob;

fn main() -> hpcr::Result<()> {
    let tau = 0.09;

    // Plain softmax: every registered class receives gradient.
    let logits = [4.0, 1.0, -2.0];
    let p = softmax_prob(&logits)?;
    let g = grad_softmax_closed_form(&p, 0, tau);
    println!("softmax gradient (all classes): {g:?}");

    // Count-weighted form: absent classes receive exactly zero.
    let counts = BatchClassCounts::from_raw(vec![6, 1, 0]);
    let g = grad_pcr_closed_form(&logits, &counts, 0, tau)?;
    println!("count-weighted gradient (k = [6,1,0]): {g:?}");
    println!(
        "sum_y for the anchor class: {:.4}",
        sum_y(&logits, &counts, 0)
    );
    println!();

    // Relative penalty: how strongly each negative class is pushed away,
    // normalized to 1 across negatives. Small tau concentrates the penalty
    // on the most similar negative.
    let sims = [0.9, 0.65, 0.4, -0.2];
    let counts = BatchClassCounts::from_raw(vec![1, 2, 2, 1]);
    println!(
        "{:>6} {:>8} {:>8} {:>8}",
        "tau", "r(c=1)", "r(c=2)", "r(c=3)"
    );
    for tau in [1.0, 0.5, 0.2, 0.09, 0.05] {
        let r: Vec<f64> = (1..4)
            .map(|c| relative_penalty(&sims, &counts, c, 0, tau).unwrap())
            .collect();
        println!("{tau:>6.2} {:>8.4} {:>8.4} {:>8.4}", r[0], r[1], r[2]);
    }
    println!();

    // More same-class samples in the batch shrink the gradients of a
    // new-class anchor and amplify those of an old-class anchor.
    let o = [0.3, -0.5];
    println!(
        "{:>4} {:>22} {:>22}",
        "k", "|grad| anchor new", "|grad| anchor old"
    );
    for k in [1usize, 2, 4, 8, 16] {
        let counts = BatchClassCounts::from_raw(vec![k, 1]);
        let g_new = grad_pcr_closed_form(&o, &counts, 0, 1.0)?;
        let g_old = grad_pcr_closed_form(&o, &counts, 1, 1.0)?;
        println!("{k:>4} {:>22.4} {:>22.4}", g_new[0].abs(), g_old[1].abs());
    }
    Ok(())
}

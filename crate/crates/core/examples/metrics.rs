//! Offline ranking metrics on a hand-made scored list.

use ideal::metrics::{auc, hitrate_at_k, ndcg_at_k, rank_in_candidates, spearman, uauc, ScoredItem};

fn main() -> ideal::Result<()> {
    let scored = vec![
        ScoredItem { user: 0, score: 0.9, label: 1 },
        ScoredItem { user: 0, score: 0.4, label: 0 },
        ScoredItem { user: 0, score: 0.7, label: 0 },
        ScoredItem { user: 1, score: 0.2, label: 1 },
        ScoredItem { user: 1, score: 0.3, label: 0 },
        ScoredItem { user: 2, score: 0.5, label: 1 },
    ];
    println!("AUC  = {:.4}", auc(&scored)?);
    let u = uauc(&scored)?;
    println!("UAUC = {:.4} (users {:?} included, {:?} excluded as single-class)", u.value, u.included, u.excluded);

    let rank = rank_in_candidates(&[0.1, 0.8, 0.3, 0.6], &[0, 0, 1, 0])?;
    println!("positive ranked {rank}: NDCG@2 {:.4}, HR@2 {}, NDCG@5 {:.4}", ndcg_at_k(rank, 2), hitrate_at_k(rank, 2), ndcg_at_k(rank, 5));
    println!("spearman = {:.3}", spearman(&[0.1, 0.2, 0.3, 0.4], &[4.0, 3.0, 2.5, 1.0]));
    Ok(())
}

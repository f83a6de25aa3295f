//! Request policies on synthetic per-step scores: threshold calibration to a
//! budget, plus the LOF and hypersphere drift baselines.

use ideal::kernel::Rng;
use ideal::policy::{calibrate_threshold, lof_score, svdd_fit, svdd_score, Direction, Policy, StepFeatures};

fn main() -> ideal::Result<()> {
    let mut rng = Rng::new(3);
    let calibration: Vec<f64> = (0..2000).map(|_| rng.uniform()).collect();
    let held_out: Vec<f64> = (0..5000).map(|_| rng.uniform()).collect();

    for f in [0.1, 0.3, 0.5] {
        let tau = calibrate_threshold(&calibration, f, Direction::LowRequests)?;
        let policy = Policy::MrsThreshold(tau);
        let mut requests = 0;
        for &s in &held_out {
            let features = StepFeatures { mrs: Some(s), ..Default::default() };
            requests += usize::from(policy.decide(&features, &mut rng)?);
        }
        println!("budget {f:.1}: tau {tau:.4}, realized {:.4}", requests as f64 / held_out.len() as f64);
    }

    // Embeddings clustered near the origin, then one far-away query.
    let reference: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.normal() * 0.1, rng.normal() * 0.1]).collect();
    let near = [0.05, -0.02];
    let far = [2.0, 2.0];
    println!("LOF   near {:.3}  far {:.3}", lof_score(&near, &reference, 3)?, lof_score(&far, &reference, 3)?);
    let sphere = svdd_fit(&reference, 0.9)?;
    println!("SVDD  radius {:.3}  near {:.3}  far {:.3}", sphere.radius, svdd_score(&near, &sphere), svdd_score(&far, &sphere));
    Ok(())
}

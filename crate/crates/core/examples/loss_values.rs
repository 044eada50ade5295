//! The objectives on hand-made embeddings: NT-Xent, VICReg and the
//! action-aware sum `L_inv + λ L_action`.

use aassl::actions::DatasetStyle;
use aassl::losses::{aa_loss, nt_xent, vicreg, BaseLoss, LossParams, Mat64, VicregWeights};

fn main() -> aassl::Result<()> {
    let z = Mat64::new(4, 3, vec![1.0, 0.2, 0.0, 0.1, 1.0, 0.3, -0.4, 0.1, 1.0, 0.7, -0.7, 0.2]);
    let same = nt_xent(&z, &z, 0.1)?;
    println!("NT-Xent with identical views: {:.4}", same.value);

    let collapsed = Mat64::new(4, 3, [0.5, 0.5, 0.5].repeat(4));
    println!("NT-Xent of a collapsed batch: {:.4} (ln 7 = {:.4})", nt_xent(&collapsed, &collapsed, 0.1)?.value, 7f64.ln());

    let v = vicreg(&z, &collapsed, VicregWeights { sim: 25.0, var: 25.0, cov: 1.0 })?;
    println!(
        "VICReg: total {:.4} = 25 * {:.4} + 25 * {:.4} + {:.4}",
        v.value, v.invariance, v.variance, v.covariance
    );

    let shifted = Mat64::new(4, 3, z.data.iter().map(|x| x + 0.1).collect());
    for lambda in [0.0, 1.0, 10.0] {
        let mut p = LossParams::for_style(BaseLoss::SimClr, DatasetStyle::Yaw);
        p.lambda = lambda;
        let t = aa_loss(&z, &shifted, &z, &collapsed, &p)?;
        println!("AA loss λ={lambda:>4}: total {:.4}, inv {:.4}, action {:.4}", t.total, t.inv, t.action);
    }
    Ok(())
}

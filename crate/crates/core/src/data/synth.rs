use super::{DatasetSplit, SplitMeta};
use crate::error::{Error, Result};
use crate::models::random_unit_columns;
use crate::numkit::{Matrix, RngStream};
use crate::sparsecode::Dictionary;

/// Samples `x = Φz + σξ` from a random unit-norm dictionary, where each `z`
/// has `k_active` nonnegative exponential coefficients on random atoms.
pub fn synth_sparse_dataset(
    m: usize,
    k_true: usize,
    k_active: usize,
    n: usize,
    noise: f64,
    rng: &mut RngStream,
) -> Result<(DatasetSplit, Dictionary)> {
    if k_active > k_true {
        return Err(Error::config(format!(
            "k_active {k_active} exceeds k_true {k_true}"
        )));
    }
    let phi = random_unit_columns(m, k_true, rng);
    let mut x = Matrix::zeros(n, m);
    for i in 0..n {
        let atoms = rng.sample_without_replacement(k_true, k_active);
        let row = x.row_mut(i);
        for a in atoms {
            let c = rng.exponential();
            for (r, v) in row.iter_mut().enumerate() {
                *v += c * phi.get(r, a);
            }
        }
        if noise > 0.0 {
            for v in row.iter_mut() {
                *v += noise * rng.normal();
            }
        }
    }
    let split = DatasetSplit::new(
        x,
        None,
        SplitMeta {
            source: format!("synthetic:m{m}:k{k_true}:a{k_active}"),
            patch_size: 0,
            preprocessing: format!("noise sigma {noise}"),
            checksum: None,
        },
    )?;
    Ok((split, Dictionary::new(phi)?))
}

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Entry};

/// Elementwise `alpha * a + (1 - alpha) * b` over every named entry. The
/// endpoints return exact copies of the corresponding input.
pub fn wise_ft_merge(a: &Checkpoint, b: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let na: BTreeSet<&str> = a.entries.iter().map(|e| e.name.as_str()).collect();
    let nb: BTreeSet<&str> = b.entries.iter().map(|e| e.name.as_str()).collect();
    if na != nb {
        let diff = na.symmetric_difference(&nb).map(|s| s.to_string()).collect();
        return Err(Error::NameMismatch(diff));
    }
    if a.config != b.config {
        return Err(Error::Config(
            "merge operands were built for different model configurations".into(),
        ));
    }
    if alpha == 1.0 {
        return Ok(a.clone());
    }
    if alpha == 0.0 {
        return Ok(b.clone());
    }
    let entries = a
        .entries
        .iter()
        .map(|ea| {
            let eb = b.entry(&ea.name).expect("name sets are equal");
            if ea.shape != eb.shape {
                return Err(Error::ShapeMismatch {
                    name: ea.name.clone(),
                    expected: ea.shape.clone(),
                    found: eb.shape.clone(),
                });
            }
            let values = ea
                .values
                .iter()
                .zip(&eb.values)
                .map(|(&x, &y)| (alpha * f64::from(x) + (1.0 - alpha) * f64::from(y)) as f32)
                .collect();
            Ok(Entry {
                name: ea.name.clone(),
                shape: ea.shape.clone(),
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        config: a.config,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::{Model, ModelConfig};

    fn ckpt(seed: u64) -> Checkpoint {
        Checkpoint::from_model(&Model::new(ModelConfig::micro(30), seed).unwrap())
    }

    fn scalar(v: f32) -> Checkpoint {
        let mut c = ckpt(0);
        c.entries.clear();
        c.entries.push(Entry {
            name: "w".into(),
            shape: vec![1],
            values: vec![v],
        });
        c
    }

    #[test]
    fn endpoints_are_exact() {
        let (a, b) = (ckpt(1), ckpt(2));
        assert_eq!(wise_ft_merge(&a, &b, 1.0).unwrap(), a);
        assert_eq!(wise_ft_merge(&a, &b, 0.0).unwrap(), b);
    }

    #[test]
    fn midpoint() {
        let m = wise_ft_merge(&scalar(2.0), &scalar(4.0), 0.5).unwrap();
        assert_eq!(m.entries[0].values, vec![3.0]);
    }

    #[test]
    fn mismatched_names_list_symmetric_difference() {
        let a = ckpt(1);
        let mut b = ckpt(2);
        b.entries[0].name = "text.embedding".into();
        match wise_ft_merge(&a, &b, 0.5) {
            Err(Error::NameMismatch(d)) => assert_eq!(d, vec!["text.embed", "text.embedding"]),
            other => panic!("{other:?}"),
        }
        assert!(wise_ft_merge(&a, &ckpt(2), 1.5).is_err());
    }

    #[test]
    fn half_is_mean_within_one_ulp() {
        let (a, b) = (ckpt(3), ckpt(4));
        let m = wise_ft_merge(&a, &b, 0.5).unwrap();
        for ((ea, eb), em) in a.entries.iter().zip(&b.entries).zip(&m.entries) {
            for ((&x, &y), &z) in ea.values.iter().zip(&eb.values).zip(&em.values) {
                let mean = (f64::from(x) + f64::from(y)) / 2.0;
                let ulp = f64::from(f32::EPSILON) * mean.abs().max(f64::from(f32::MIN_POSITIVE));
                assert!((f64::from(z) - mean).abs() <= ulp);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn linear_in_alpha(alpha in 0.0f64..1.0, x in -10.0f32..10.0, y in -10.0f32..10.0) {
            let (a, b) = (scalar(x), scalar(y));
            let p = wise_ft_merge(&a, &b, alpha).unwrap().entries[0].values[0];
            let q = wise_ft_merge(&a, &b, 1.0 - alpha).unwrap().entries[0].values[0];
            let tol = 4.0 * f32::EPSILON * (x.abs() + y.abs()).max(1e-30);
            prop_assert!(((p + q) - (x + y)).abs() <= tol);
        }
    }
}

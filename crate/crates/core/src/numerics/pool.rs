use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Tensor;

/// Global pooling head: average (GAP) or max (GMP) over each feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[serde(alias = "gap")]
    Avg,
    #[serde(alias = "gmp")]
    Max,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    mode: PoolMode,
    shape: [usize; 3],
    argmax: Vec<usize>,
}

impl PoolCache {
    /// Per-channel argmax positions (empty in average mode).
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Reduces an MxHxW tensor to one value per channel.
pub fn global_pool(features: &Tensor, mode: PoolMode) -> Result<(Vec<f64>, PoolCache)> {
    let (m, h, w) = features.dims3()?;
    if h * w == 0 {
        return Err(Error::Empty("global pooling over an empty spatial extent".into()));
    }
    let mut argmax = Vec::new();
    let pooled = (0..m)
        .map(|c| {
            let ch = features.channel(c);
            match mode {
                PoolMode::Avg => ch.iter().sum::<f64>() / (h * w) as f64,
                PoolMode::Max => {
                    let (idx, v) = ch.iter().enumerate().fold((0, ch[0]), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    });
                    argmax.push(idx);
                    v
                }
            }
        })
        .collect();
    Ok((
        pooled,
        PoolCache {
            mode,
            shape: [m, h, w],
            argmax,
        },
    ))
}

/// Max mode routes each channel's gradient to a single argmax position.
pub fn global_pool_backward(grad: &[f64], cache: &PoolCache) -> Result<Tensor> {
    let [m, h, w] = cache.shape;
    if grad.len() != m {
        return Err(Error::Shape(format!(
            "pool gradient length {} != channels {m}",
            grad.len()
        )));
    }
    let mut out = Tensor::zeros(&cache.shape);
    let hw = (h * w) as f64;
    for (c, &g) in grad.iter().enumerate() {
        let ch = out.channel_mut(c);
        match cache.mode {
            PoolMode::Avg => ch.iter_mut().for_each(|v| *v = g / hw),
            PoolMode::Max => ch[cache.argmax[c]] = g,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_map_avg_and_max() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_pool(&t, PoolMode::Avg).unwrap().0, vec![2.5]);
        assert_eq!(global_pool(&t, PoolMode::Max).unwrap().0, vec![4.0]);
    }

    #[test]
    fn constant_and_negative_maps() {
        let c = Tensor::filled(&[2, 3, 3], -0.75);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            assert_eq!(global_pool(&c, mode).unwrap().0, vec![-0.75, -0.75]);
        }
        let t = Tensor::new(vec![1, 1, 3], vec![-5.0, -0.5, -2.0]).unwrap();
        assert_eq!(global_pool(&t, PoolMode::Max).unwrap().0, vec![-0.5]);
    }

    #[test]
    fn max_backward_hits_one_position() {
        let t = Tensor::new(vec![2, 1, 3], vec![0.0, 9.0, 1.0, 7.0, 2.0, 7.0]).unwrap();
        let (_, cache) = global_pool(&t, PoolMode::Max).unwrap();
        let g = global_pool_backward(&[1.0, 2.0], &cache).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn serde_accepts_head_aliases() {
        let m: PoolMode = serde_json::from_str("\"gmp\"").unwrap();
        assert_eq!(m, PoolMode::Max);
        let m: PoolMode = serde_json::from_str("\"avg\"").unwrap();
        assert_eq!(m, PoolMode::Avg);
    }
}

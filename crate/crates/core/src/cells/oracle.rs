//! Reference unrolling of the latent-state recurrence.
//!
//! Evaluates the cell with plain loops in f64, sharing no code with the
//! graph/GEMM path, so it can serve as an oracle for the incremental state.

use super::{Cell, CellState};
use crate::error::{shape_mismatch, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

struct Plane {
    c: usize,
    h: usize,
    w: usize,
}

fn values<T: Float>(store: &ParamStore<T>, id: ParamId) -> Vec<f64> {
    store.get(id).data().iter().map(|v| v.as_f64()).collect()
}

/// Same-padded stride-1 cross-correlation of one sample.
fn conv_same(x: &[f64], dims: &Plane, w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let out_c = b.len();
    let pad = (k - 1) as isize / 2;
    let mut out = vec![0.0; out_c * dims.h * dims.w];
    for o in 0..out_c {
        for y in 0..dims.h {
            for xx in 0..dims.w {
                let mut acc = b[o];
                for c in 0..dims.c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = y as isize + ki as isize - pad;
                            let ix = xx as isize + kj as isize - pad;
                            if iy < 0 || ix < 0 || iy >= dims.h as isize || ix >= dims.w as isize {
                                continue;
                            }
                            acc += x[(c * dims.h + iy as usize) * dims.w + ix as usize]
                                * w[((o * dims.c + c) * k + ki) * k + kj];
                        }
                    }
                }
                out[(o * dims.h + y) * dims.w + xx] = acc;
            }
        }
    }
    out
}

/// Same-padded stride-1 transposed convolution of one sample; `w` is
/// `[dims.c, out_c, k, k]`.
fn conv_transpose_same(x: &[f64], dims: &Plane, w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let out_c = b.len();
    let pad = (k - 1) as isize / 2;
    let mut out = vec![0.0; out_c * dims.h * dims.w];
    for (o, &bias) in b.iter().enumerate() {
        out[o * dims.h * dims.w..(o + 1) * dims.h * dims.w].fill(bias);
    }
    for c in 0..dims.c {
        for y in 0..dims.h {
            for xx in 0..dims.w {
                let v = x[(c * dims.h + y) * dims.w + xx];
                for o in 0..out_c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let oy = y as isize + ki as isize - pad;
                            let ox = xx as isize + kj as isize - pad;
                            if oy < 0 || ox < 0 || oy >= dims.h as isize || ox >= dims.w as isize {
                                continue;
                            }
                            out[(o * dims.h + oy as usize) * dims.w + ox as usize] +=
                                v * w[((c * out_c + o) * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
    out
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// State after feeding `inputs` (each `[N_b, C, H, W]`) in order through a
/// freshly reset cell.
pub fn latent_unroll_oracle<T: Float>(
    inputs: &[Tensor<T>],
    cell: &Cell,
    store: &ParamStore<T>,
) -> Result<CellState<T>> {
    let base = cell.base();
    let first = match inputs.first() {
        Some(x) => x.dims4("latent_unroll_oracle")?,
        None => return CellState::zeros(base.channels, 1, 1, matches!(cell, Cell::V2(_))),
    };
    let (h, w) = (first[2], first[3]);
    let hw = h * w;
    let ch = base.channels;
    let k = base.kernel;
    let gates = [
        (values(store, base.w_xi), values(store, base.b_i)),
        (values(store, base.w_xf), values(store, base.b_f)),
        (values(store, base.w_xo), values(store, base.b_o)),
        (values(store, base.w_xc), values(store, base.b_c)),
    ];

    let mut c_state = vec![0.0; ch * hw];
    let mut h_state = vec![0.0; ch * hw];

    for x in inputs {
        let [n, c, xh, xw] = x.dims4("latent_unroll_oracle")?;
        if (c, xh, xw) != (cell.in_channels(), h, w) {
            return Err(shape_mismatch("latent_unroll_oracle", &first, x.shape()));
        }
        let xs: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();

        let recovered = if let Cell::V2(v2) = cell {
            let dims = Plane { c: ch, h, w };
            Some(conv_transpose_same(&h_state, &dims, &values(store, v2.w_rec), &values(store, v2.b_rec), k))
        } else {
            None
        };

        let mut c_sum = vec![0.0; ch * hw];
        let mut y_sum = vec![0.0; ch * hw];
        for s in 0..n {
            let sample = &xs[s * c * hw..(s + 1) * c * hw];
            let input: Vec<f64> = match (cell, &recovered) {
                (Cell::V2(v2), Some(rec)) => {
                    let wm = values(store, v2.w_mix);
                    let bm = values(store, v2.b_mix);
                    let mut mixed = vec![0.0; c * hw];
                    for o in 0..c {
                        for p in 0..hw {
                            let mut acc = bm[o];
                            for i in 0..c {
                                acc += wm[o * 2 * c + i] * sample[i * hw + p];
                                acc += wm[o * 2 * c + c + i] * rec[i * hw + p];
                            }
                            mixed[o * hw + p] = acc;
                        }
                    }
                    mixed
                }
                _ => sample.to_vec(),
            };
            let dims = Plane { c, h, w };
            let pre: Vec<Vec<f64>> = gates
                .iter()
                .map(|(wt, b)| conv_same(&input, &dims, wt, b, k))
                .collect();
            for p in 0..ch * hw {
                let i = logistic(pre[0][p]);
                let f = logistic(pre[1][p]);
                let o = logistic(pre[2][p]);
                let cand = pre[3][p].tanh();
                let c_new = f * c_state[p] + i * cand;
                c_sum[p] += c_new;
                y_sum[p] += o * c_new.tanh();
            }
        }
        for p in 0..ch * hw {
            c_state[p] = c_sum[p] / n as f64;
            h_state[p] = 0.5 * (h_state[p] + y_sum[p] / n as f64);
        }
    }

    let to_t = |v: &[f64]| Tensor::new(&[1, ch, h, w], v.iter().map(|&x| T::of(x)).collect());
    Ok(CellState {
        c: to_t(&c_state)?,
        h: matches!(cell, Cell::V2(_)).then(|| to_t(&h_state)).transpose()?,
        epoch_fresh: false,
    })
}

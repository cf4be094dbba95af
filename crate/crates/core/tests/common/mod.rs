//! Plain-loop reference implementations used as test oracles. Nothing here
//! calls into the library's kernels.

#![allow(dead_code)]

use lifthead::{ParamId, ParamStore, Tensor};
use rand::Rng;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn random<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let (r, c) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("rank {} tensor", s.len()),
        };
        Self::new(r, c, t.data().to_vec())
    }

    pub fn tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[self.rows, self.cols], self.data.clone()).unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.at(i, k) * other.at(k, j);
                }
                out.data[i * other.cols + j] = s;
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.at(i, j);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::new(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        )
    }

    pub fn add_row(&self, row: &[f64]) -> Mat {
        assert_eq!(row.len(), self.cols);
        let mut out = self.clone();
        for r in out.data.chunks_mut(self.cols) {
            r.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        out
    }

    pub fn hcat(parts: &[Mat]) -> Mat {
        let rows = parts[0].rows;
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Mat::new(rows, cols, data)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Mat {
        let data = rows.iter().flat_map(|&r| self.row(r).to_vec()).collect();
        Mat::new(rows.len(), self.cols, data)
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        assert_eq!(self.data.len(), other.len());
        self.data.iter().zip(other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let data = (0..m.rows).flat_map(|i| softmax(m.row(i))).collect();
    Mat::new(m.rows, m.cols, data)
}

pub fn layer_norm(m: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let mut data = Vec::with_capacity(m.data.len());
    for i in 0..m.rows {
        let r = m.row(i);
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for (j, v) in r.iter().enumerate() {
            data.push(gamma[j] * (v - mean) / (var + eps).sqrt() + beta[j]);
        }
    }
    Mat::new(m.rows, m.cols, data)
}

pub fn relu(m: &Mat) -> Mat {
    m.map(|v| v.max(0.0))
}

/// Single-head scaled dot-product attention computed entry by entry.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, scale_dim: usize) -> Mat {
    let c = (scale_dim as f64).sqrt();
    let mut out = Mat::zeros(q.rows, v.cols);
    for i in 0..q.rows {
        let scores: Vec<f64> = (0..k.rows)
            .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / c)
            .collect();
        let w = softmax(&scores);
        for (j, wj) in w.iter().enumerate() {
            for t in 0..v.cols {
                out.data[i * v.cols + t] += wj * v.at(j, t);
            }
        }
    }
    out
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Mat {
    let id = store.id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    Mat::from_tensor(store.get(id))
}

pub fn vector(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get(store.id_of(name).unwrap()).data().to_vec()
}

pub fn linear(store: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    x.matmul(&param(store, &format!("{name}.weight")))
        .add_row(&vector(store, &format!("{name}.bias")))
}

pub fn mha(store: &ParamStore<f64>, name: &str, heads: usize, scale_dim: usize, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let parts: Vec<Mat> = (0..heads)
        .map(|i| {
            let qh = linear(store, &format!("{name}.head{i}.q"), q);
            let kh = linear(store, &format!("{name}.head{i}.k"), k);
            let vh = linear(store, &format!("{name}.head{i}.v"), v);
            attention(&qh, &kh, &vh, scale_dim)
        })
        .collect();
    linear(store, &format!("{name}.out"), &Mat::hcat(&parts))
}

pub fn ffn(store: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let h = relu(&linear(store, &format!("{name}.fc0"), x));
    let h = relu(&linear(store, &format!("{name}.fc1"), &h));
    linear(store, &format!("{name}.fc2"), &h)
}

pub fn ln(store: &ParamStore<f64>, name: &str, x: &Mat, eps: f64) -> Mat {
    layer_norm(
        x,
        &vector(store, &format!("{name}.gamma")),
        &vector(store, &format!("{name}.beta")),
        eps,
    )
}

/// Overwrites every tensor with uniform noise so that no bias or gain sits
/// at a special value.
pub fn randomize<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R, scale: f64) {
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

pub fn zero_tensor(store: &mut ParamStore<f64>, name: &str) {
    let id: ParamId = store.id_of(name).unwrap();
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

//! Whole-tensor operations on tape variables.
//!
//! Every op validates shapes with asserts (programmer contract: callers
//! validate user input first), computes the forward value eagerly, and pushes
//! a backward closure. Backward closures *accumulate* into parent buffers.
//!
//! Conventions used throughout:
//! * matrices are row-major; `[m, n]` means m rows of n columns;
//! * "rows" of an N-d tensor are slices over the trailing axis;
//! * zero-norm vectors have cosine similarity 0 (and propagate no gradient);
//! * softmax/log-sum-exp are stabilised by max subtraction.

use crate::error::{Error, Result};

use super::tape::Var;
use super::tensor::{strides_for, Tensor};

// ── Elementwise binary ──────────────────────────────────────────────────────

fn zip_ew(name: &'static str, a: Var<'_>, b: Var<'_>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (va, vb) = (a.value(), b.value());
    assert_eq!(va.shape(), vb.shape(), "{name}: shape mismatch");
    let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(va.shape().to_vec(), data)
}

impl<'t> Var<'t> {
    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let out = zip_ew("add", self, rhs, |x, y| x + y);
        self.tape.push_op("add", out, &[self, rhs], |ctx| {
            for i in 0..2 {
                if let Some(d) = ctx.grads.get(i) {
                    for (di, gi) in d.iter_mut().zip(ctx.out_grad) {
                        *di += gi;
                    }
                }
            }
        })
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let out = zip_ew("sub", self, rhs, |x, y| x - y);
        self.tape.push_op("sub", out, &[self, rhs], |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for (di, gi) in d.iter_mut().zip(ctx.out_grad) {
                    *di += gi;
                }
            }
            if let Some(d) = ctx.grads.get(1) {
                for (di, gi) in d.iter_mut().zip(ctx.out_grad) {
                    *di -= gi;
                }
            }
        })
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let out = zip_ew("mul", self, rhs, |x, y| x * y);
        self.tape.push_op("mul", out, &[self, rhs], |ctx| {
            if ctx.grads.needs(0) {
                let b = ctx.parents[1].clone();
                let d = ctx.grads.get(0).expect("needs checked");
                for ((di, gi), bi) in d.iter_mut().zip(ctx.out_grad).zip(b.data()) {
                    *di += gi * bi;
                }
            }
            if ctx.grads.needs(1) {
                let a = ctx.parents[0].clone();
                let d = ctx.grads.get(1).expect("needs checked");
                for ((di, gi), ai) in d.iter_mut().zip(ctx.out_grad).zip(a.data()) {
                    *di += gi * ai;
                }
            }
        })
    }

    /// Elementwise division; caller guarantees a nonzero denominator.
    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        let out = zip_ew("div", self, rhs, |x, y| x / y);
        self.tape.push_op("div", out, &[self, rhs], |ctx| {
            if ctx.grads.needs(0) {
                let b = ctx.parents[1].clone();
                let d = ctx.grads.get(0).expect("needs checked");
                for ((di, gi), bi) in d.iter_mut().zip(ctx.out_grad).zip(b.data()) {
                    *di += gi / bi;
                }
            }
            if ctx.grads.needs(1) {
                let (a, b) = (ctx.parents[0].clone(), ctx.parents[1].clone());
                let d = ctx.grads.get(1).expect("needs checked");
                for i in 0..d.len() {
                    d[i] -= ctx.out_grad[i] * a.data()[i] / (b.data()[i] * b.data()[i]);
                }
            }
        })
    }

    // ── Elementwise unary ───────────────────────────────────────────────────

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Multiply by a compile-time-known scalar.
    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape.push_op("scale", out, &[self], move |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for (di, gi) in d.iter_mut().zip(ctx.out_grad) {
                    *di += gi * c;
                }
            }
        })
    }

    /// Add a compile-time-known scalar.
    pub fn offset(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape.push_op("offset", out, &[self], |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for (di, gi) in d.iter_mut().zip(ctx.out_grad) {
                    *di += gi;
                }
            }
        })
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|v| v.max(0.0));
        self.tape.push_op("relu", out, &[self], |ctx| {
            if ctx.grads.needs(0) {
                let x = ctx.parents[0].clone();
                let d = ctx.grads.get(0).expect("needs checked");
                for ((di, gi), xi) in d.iter_mut().zip(ctx.out_grad).zip(x.data()) {
                    if *xi > 0.0 {
                        *di += gi;
                    }
                }
            }
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        self.tape.push_op("sigmoid", out, &[self], |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for ((di, gi), yi) in d.iter_mut().zip(ctx.out_grad).zip(ctx.out_value.data()) {
                    *di += gi * yi * (1.0 - yi);
                }
            }
        })
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.tape.push_op("exp", out, &[self], |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for ((di, gi), yi) in d.iter_mut().zip(ctx.out_grad).zip(ctx.out_value.data()) {
                    *di += gi * yi;
                }
            }
        })
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn ln(self) -> Var<'t> {
        let out = self.value().map(f64::ln);
        self.tape.push_op("ln", out, &[self], |ctx| {
            if ctx.grads.needs(0) {
                let x = ctx.parents[0].clone();
                let d = ctx.grads.get(0).expect("needs checked");
                for ((di, gi), xi) in d.iter_mut().zip(ctx.out_grad).zip(x.data()) {
                    *di += gi / xi;
                }
            }
        })
    }

    // ── Reductions ──────────────────────────────────────────────────────────

    pub fn sum_all(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().data().iter().sum());
        self.tape.push_op("sum_all", out, &[self], |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                let g = ctx.out_grad[0];
                for di in d.iter_mut() {
                    *di += g;
                }
            }
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.numel();
        assert!(n > 0, "mean_all on empty tensor");
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum over the trailing axis: `[..., s] -> [...]`.
    pub fn sum_last(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        assert!(!shape.is_empty(), "sum_last needs rank >= 1");
        let s = *shape.last().unwrap();
        let rows = v.numel() / s.max(1);
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = v.data()[r * s..(r + 1) * s].iter().sum();
        }
        let out = Tensor::from_parts(shape[..shape.len() - 1].to_vec(), data);
        self.tape.push_op("sum_last", out, &[self], move |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for r in 0..ctx.out_grad.len() {
                    let g = ctx.out_grad[r];
                    for di in &mut d[r * s..(r + 1) * s] {
                        *di += g;
                    }
                }
            }
        })
    }

    // ── Shape ops ───────────────────────────────────────────────────────────

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let out = self.value().reshape(shape).expect("reshape element count");
        self.tape.push_op("reshape", out, &[self], |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for (di, gi) in d.iter_mut().zip(ctx.out_grad) {
                    *di += gi;
                }
            }
        })
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(self, perm: Vec<usize>) -> Var<'t> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        assert_eq!(perm.len(), in_shape.len(), "permute rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let map = permutation_map(&in_shape, &perm);
        let mut data = vec![0.0; v.numel()];
        for (lin, &out_lin) in map.iter().enumerate() {
            data[out_lin] = v.data()[lin];
        }
        let out = Tensor::from_parts(out_shape, data);
        self.tape.push_op("permute", out, &[self], move |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for (lin, &out_lin) in map.iter().enumerate() {
                    d[lin] += ctx.out_grad[out_lin];
                }
            }
        })
    }

    /// Reverses the listed axes.
    pub fn flip(self, axes: Vec<usize>) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        for &a in &axes {
            assert!(a < shape.len(), "flip axis {a} out of range for {shape:?}");
        }
        let map = flip_map(&shape, &axes);
        let mut data = vec![0.0; v.numel()];
        for (lin, &out_lin) in map.iter().enumerate() {
            data[out_lin] = v.data()[lin];
        }
        let out = Tensor::from_parts(shape, data);
        self.tape.push_op("flip", out, &[self], move |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for (lin, &out_lin) in map.iter().enumerate() {
                    d[lin] += ctx.out_grad[out_lin];
                }
            }
        })
    }

    pub fn transpose2d(self) -> Var<'t> {
        assert_eq!(self.shape().len(), 2, "transpose2d needs rank 2");
        self.permute(vec![1, 0])
    }

    /// Selects slice `i` along axis 0: `[n, ...] -> [...]`.
    pub fn index_axis0(self, i: usize) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        assert!(!shape.is_empty() && i < shape[0], "index_axis0 out of range");
        let block = v.numel() / shape[0];
        let data = v.data()[i * block..(i + 1) * block].to_vec();
        let out = Tensor::from_parts(shape[1..].to_vec(), data);
        self.tape.push_op("index_axis0", out, &[self], move |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for (di, gi) in d[i * block..(i + 1) * block].iter_mut().zip(ctx.out_grad) {
                    *di += gi;
                }
            }
        })
    }

    // ── Linear algebra ──────────────────────────────────────────────────────

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (va, vb) = (self.value(), rhs.value());
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} @ {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = va.data()[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &vb.data()[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.tape.push_op("matmul", out, &[self, rhs], move |ctx| {
            if ctx.grads.needs(0) {
                // dA = G @ B^T
                let b = ctx.parents[1].clone();
                let d = ctx.grads.get(0).expect("needs checked");
                for i in 0..m {
                    for j in 0..n {
                        let g = ctx.out_grad[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            d[i * k + p] += g * b.data()[p * n + j];
                        }
                    }
                }
            }
            if ctx.grads.needs(1) {
                // dB = A^T @ G
                let a = ctx.parents[0].clone();
                let d = ctx.grads.get(1).expect("needs checked");
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            d[p * n + j] += av * ctx.out_grad[i * n + j];
                        }
                    }
                }
            }
        })
    }

    /// Affine map over the trailing axis: `x [..., i] @ W^T [o, i] + b [o]`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Var<'t> {
        let (vx, vw, vb) = (self.value(), w.value(), b.value());
        let sx = vx.shape().to_vec();
        let (so, sb) = (vw.shape(), vb.shape());
        assert!(so.len() == 2 && sb.len() == 1 && so[0] == sb[0], "linear param shapes");
        let (o, i) = (so[0], so[1]);
        assert_eq!(*sx.last().expect("linear input rank >= 1"), i, "linear in-dim");
        let rows = vx.numel() / i;
        let mut data = vec![0.0; rows * o];
        for r in 0..rows {
            let xr = &vx.data()[r * i..(r + 1) * i];
            let or = &mut data[r * o..(r + 1) * o];
            for oo in 0..o {
                let wrow = &vw.data()[oo * i..(oo + 1) * i];
                let mut acc = vb.data()[oo];
                for ii in 0..i {
                    acc += wrow[ii] * xr[ii];
                }
                or[oo] = acc;
            }
        }
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        out_shape.push(o);
        let out = Tensor::from_parts(out_shape, data);
        self.tape.push_op("linear", out, &[self, w, b], move |ctx| {
            if ctx.grads.needs(0) {
                let wv = ctx.parents[1].clone();
                let d = ctx.grads.get(0).expect("needs checked");
                for r in 0..rows {
                    for oo in 0..o {
                        let g = ctx.out_grad[r * o + oo];
                        if g == 0.0 {
                            continue;
                        }
                        let wrow = &wv.data()[oo * i..(oo + 1) * i];
                        let dr = &mut d[r * i..(r + 1) * i];
                        for ii in 0..i {
                            dr[ii] += g * wrow[ii];
                        }
                    }
                }
            }
            if ctx.grads.needs(1) {
                let xv = ctx.parents[0].clone();
                let d = ctx.grads.get(1).expect("needs checked");
                for r in 0..rows {
                    let xr = &xv.data()[r * i..(r + 1) * i];
                    for oo in 0..o {
                        let g = ctx.out_grad[r * o + oo];
                        if g == 0.0 {
                            continue;
                        }
                        let dw = &mut d[oo * i..(oo + 1) * i];
                        for ii in 0..i {
                            dw[ii] += g * xr[ii];
                        }
                    }
                }
            }
            if let Some(d) = ctx.grads.get(2) {
                for r in 0..rows {
                    for oo in 0..o {
                        d[oo] += ctx.out_grad[r * o + oo];
                    }
                }
            }
        })
    }

    // ── Softmax family ──────────────────────────────────────────────────────

    /// Temperature softmax over the trailing axis; `tau > 0` is the caller's
    /// contract (the public wrapper validates).
    pub fn softmax_last(self, tau: f64) -> Var<'t> {
        assert!(tau > 0.0 && tau.is_finite(), "softmax temperature must be positive");
        let v = self.value();
        let shape = v.shape().to_vec();
        let s = *shape.last().expect("softmax needs rank >= 1");
        assert!(s > 0, "softmax over empty axis");
        let rows = v.numel() / s;
        let mut data = vec![0.0; v.numel()];
        for r in 0..rows {
            let xr = &v.data()[r * s..(r + 1) * s];
            let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in xr.iter().enumerate() {
                let e = ((x - m) / tau).exp();
                data[r * s + j] = e;
                z += e;
            }
            for j in 0..s {
                data[r * s + j] /= z;
            }
        }
        let out = Tensor::from_parts(shape, data);
        self.tape.push_op("softmax_last", out, &[self], move |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                let y = ctx.out_value.data();
                for r in 0..rows {
                    let (ys, gs) = (&y[r * s..(r + 1) * s], &ctx.out_grad[r * s..(r + 1) * s]);
                    let dot: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                    let dr = &mut d[r * s..(r + 1) * s];
                    for j in 0..s {
                        dr[j] += ys[j] * (gs[j] - dot) / tau;
                    }
                }
            }
        })
    }

    /// Row-wise log-sum-exp: `[r, s] -> [r]`, max-stabilised.
    pub fn lse_rows(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape();
        assert_eq!(shape.len(), 2, "lse_rows needs rank 2");
        let (rows, s) = (shape[0], shape[1]);
        assert!(s > 0, "lse_rows over empty axis");
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let xr = &v.data()[r * s..(r + 1) * s];
            let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = xr.iter().map(|&x| (x - m).exp()).sum();
            data[r] = m + z.ln();
        }
        let out = Tensor::from_parts(vec![rows], data);
        self.tape.push_op("lse_rows", out, &[self], move |ctx| {
            if ctx.grads.needs(0) {
                let x = ctx.parents[0].clone();
                let y = ctx.out_value.data().to_vec();
                let d = ctx.grads.get(0).expect("needs checked");
                for r in 0..rows {
                    let g = ctx.out_grad[r];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..s {
                        d[r * s + j] += g * (x.data()[r * s + j] - y[r]).exp();
                    }
                }
            }
        })
    }

    /// Picks one element per row: `x [r, s], idx [r] -> [r]`.
    pub fn gather_last(self, idx: Vec<usize>) -> Var<'t> {
        let v = self.value();
        let shape = v.shape();
        assert_eq!(shape.len(), 2, "gather_last needs rank 2");
        let (rows, s) = (shape[0], shape[1]);
        assert_eq!(idx.len(), rows, "gather_last index count");
        let data: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                assert!(j < s, "gather_last index {j} out of range {s}");
                v.data()[r * s + j]
            })
            .collect();
        let out = Tensor::from_parts(vec![rows], data);
        self.tape.push_op("gather_last", out, &[self], move |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for (r, &j) in idx.iter().enumerate() {
                    d[r * s + j] += ctx.out_grad[r];
                }
            }
        })
    }

    // ── Row/column scaling ──────────────────────────────────────────────────

    /// Scales row `i` of `[m, n]` by `s[i]`.
    pub fn scale_rows(self, s: Var<'t>) -> Var<'t> {
        let (va, vs) = (self.value(), s.value());
        let sa = va.shape();
        assert!(sa.len() == 2 && vs.shape() == [sa[0]], "scale_rows shapes");
        let (m, n) = (sa[0], sa[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let c = vs.data()[i];
            for j in 0..n {
                data[i * n + j] = va.data()[i * n + j] * c;
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.tape.push_op("scale_rows", out, &[self, s], move |ctx| {
            if ctx.grads.needs(0) {
                let sv = ctx.parents[1].clone();
                let d = ctx.grads.get(0).expect("needs checked");
                for i in 0..m {
                    let c = sv.data()[i];
                    for j in 0..n {
                        d[i * n + j] += ctx.out_grad[i * n + j] * c;
                    }
                }
            }
            if ctx.grads.needs(1) {
                let a = ctx.parents[0].clone();
                let d = ctx.grads.get(1).expect("needs checked");
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += ctx.out_grad[i * n + j] * a.data()[i * n + j];
                    }
                    d[i] += acc;
                }
            }
        })
    }

    /// Scales column `j` of `[m, n]` by `s[j]`.
    pub fn scale_cols(self, s: Var<'t>) -> Var<'t> {
        let (va, vs) = (self.value(), s.value());
        let sa = va.shape();
        assert!(sa.len() == 2 && vs.shape() == [sa[1]], "scale_cols shapes");
        let (m, n) = (sa[0], sa[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = va.data()[i * n + j] * vs.data()[j];
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.tape.push_op("scale_cols", out, &[self, s], move |ctx| {
            if ctx.grads.needs(0) {
                let sv = ctx.parents[1].clone();
                let d = ctx.grads.get(0).expect("needs checked");
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += ctx.out_grad[i * n + j] * sv.data()[j];
                    }
                }
            }
            if ctx.grads.needs(1) {
                let a = ctx.parents[0].clone();
                let d = ctx.grads.get(1).expect("needs checked");
                for i in 0..m {
                    for j in 0..n {
                        d[j] += ctx.out_grad[i * n + j] * a.data()[i * n + j];
                    }
                }
            }
        })
    }

    // ── Gather / scatter ────────────────────────────────────────────────────

    /// Collects rows: `x [n, d], idx [k] -> [k, d]`; indices may repeat.
    pub fn gather_rows(self, idx: Vec<usize>) -> Var<'t> {
        let v = self.value();
        let shape = v.shape();
        assert_eq!(shape.len(), 2, "gather_rows needs rank 2");
        let (n, d) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in &idx {
            assert!(r < n, "gather_rows index {r} out of range {n}");
            data.extend_from_slice(&v.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_parts(vec![idx.len(), d], data);
        self.tape.push_op("gather_rows", out, &[self], move |ctx| {
            if let Some(dst) = ctx.grads.get(0) {
                for (s, &r) in idx.iter().enumerate() {
                    for j in 0..d {
                        dst[r * d + j] += ctx.out_grad[s * d + j];
                    }
                }
            }
        })
    }

    /// Scatters rows into a zero `[n, d]` tensor; colliding indices add.
    pub fn scatter_rows(self, idx: Vec<usize>, n: usize) -> Var<'t> {
        let v = self.value();
        let shape = v.shape();
        assert_eq!(shape.len(), 2, "scatter_rows needs rank 2");
        let (k, d) = (shape[0], shape[1]);
        assert_eq!(idx.len(), k, "scatter_rows index count");
        let mut data = vec![0.0; n * d];
        for (s, &r) in idx.iter().enumerate() {
            assert!(r < n, "scatter_rows index {r} out of range {n}");
            for j in 0..d {
                data[r * d + j] += v.data()[s * d + j];
            }
        }
        let out = Tensor::from_parts(vec![n, d], data);
        self.tape.push_op("scatter_rows", out, &[self], move |ctx| {
            if let Some(dst) = ctx.grads.get(0) {
                for (s, &r) in idx.iter().enumerate() {
                    for j in 0..d {
                        dst[s * d + j] += ctx.out_grad[r * d + j];
                    }
                }
            }
        })
    }

    /// Scatter-adds trailing-axis slots into `d_out` bins shared by all rows:
    /// `x [m, s] -> [m, d_out]` with `out[m, bins[j]] += x[m, j]`;
    /// `None` bins are dropped.
    pub fn scatter_add_last(self, bins: Vec<Option<usize>>, d_out: usize) -> Var<'t> {
        let v = self.value();
        let shape = v.shape();
        assert_eq!(shape.len(), 2, "scatter_add_last needs rank 2");
        let (m, s) = (shape[0], shape[1]);
        assert_eq!(bins.len(), s, "scatter_add_last bin count");
        let mut data = vec![0.0; m * d_out];
        for i in 0..m {
            for (j, b) in bins.iter().enumerate() {
                if let Some(bj) = b {
                    assert!(*bj < d_out, "scatter_add_last bin {bj} out of range {d_out}");
                    data[i * d_out + bj] += v.data()[i * s + j];
                }
            }
        }
        let out = Tensor::from_parts(vec![m, d_out], data);
        self.tape.push_op("scatter_add_last", out, &[self], move |ctx| {
            if let Some(d) = ctx.grads.get(0) {
                for i in 0..m {
                    for (j, b) in bins.iter().enumerate() {
                        if let Some(bj) = b {
                            d[i * s + j] += ctx.out_grad[i * d_out + bj];
                        }
                    }
                }
            }
        })
    }

    /// Per-group mean of rows: `x [n, d], ids [n] -> [groups, d]`.
    /// Empty groups yield zero rows (callers track validity separately).
    pub fn group_mean_rows(self, ids: Vec<usize>, groups: usize) -> Var<'t> {
        let v = self.value();
        let shape = v.shape();
        assert_eq!(shape.len(), 2, "group_mean_rows needs rank 2");
        let (n, d) = (shape[0], shape[1]);
        assert_eq!(ids.len(), n, "group_mean_rows id count");
        let mut counts = vec![0usize; groups];
        for &g in &ids {
            assert!(g < groups, "group id {g} out of range {groups}");
            counts[g] += 1;
        }
        let mut data = vec![0.0; groups * d];
        for (r, &g) in ids.iter().enumerate() {
            for j in 0..d {
                data[g * d + j] += v.data()[r * d + j];
            }
        }
        for g in 0..groups {
            if counts[g] > 0 {
                let inv = 1.0 / counts[g] as f64;
                for j in 0..d {
                    data[g * d + j] *= inv;
                }
            }
        }
        let out = Tensor::from_parts(vec![groups, d], data);
        let counts_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        self.tape.push_op("group_mean_rows", out, &[self], move |ctx| {
            if let Some(dst) = ctx.grads.get(0) {
                for (r, &g) in ids.iter().enumerate() {
                    let inv = 1.0 / counts_f[g];
                    for j in 0..d {
                        dst[r * d + j] += ctx.out_grad[g * d + j] * inv;
                    }
                }
            }
        })
    }

    // ── Similarity ──────────────────────────────────────────────────────────

    /// All-pairs cosine similarity `a [m, d], b [n, d] -> [m, n]`;
    /// zero-norm rows yield similarity 0 and receive no gradient.
    pub fn cosine_matrix(self, rhs: Var<'t>) -> Var<'t> {
        let (va, vb) = (self.value(), rhs.value());
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "cosine_matrix shapes");
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let na: Vec<f64> = (0..m).map(|i| norm(&va.data()[i * d..(i + 1) * d])).collect();
        let nb: Vec<f64> = (0..n).map(|j| norm(&vb.data()[j * d..(j + 1) * d])).collect();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            if na[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                if nb[j] == 0.0 {
                    continue;
                }
                let dot = dot(&va.data()[i * d..(i + 1) * d], &vb.data()[j * d..(j + 1) * d]);
                data[i * n + j] = dot / (na[i] * nb[j]);
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.tape.push_op("cosine_matrix", out, &[self, rhs], move |ctx| {
            let (a, b) = (ctx.parents[0].clone(), ctx.parents[1].clone());
            let c = ctx.out_value.data();
            if ctx.grads.needs(0) {
                let dst = ctx.grads.get(0).expect("needs checked");
                for i in 0..m {
                    if na[i] == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        if nb[j] == 0.0 {
                            continue;
                        }
                        let g = ctx.out_grad[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        let cij = c[i * n + j];
                        let inv = 1.0 / (na[i] * nb[j]);
                        for t in 0..d {
                            dst[i * d + t] += g
                                * (b.data()[j * d + t] * inv
                                    - cij * a.data()[i * d + t] / (na[i] * na[i]));
                        }
                    }
                }
            }
            if ctx.grads.needs(1) {
                let dst = ctx.grads.get(1).expect("needs checked");
                for i in 0..m {
                    if na[i] == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        if nb[j] == 0.0 {
                            continue;
                        }
                        let g = ctx.out_grad[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        let cij = c[i * n + j];
                        let inv = 1.0 / (na[i] * nb[j]);
                        for t in 0..d {
                            dst[j * d + t] += g
                                * (a.data()[i * d + t] * inv
                                    - cij * b.data()[j * d + t] / (nb[j] * nb[j]));
                        }
                    }
                }
            }
        })
    }

    /// Paired cosine over the trailing axis: `a [..., d], b [..., d] -> [...]`.
    pub fn cosine_pairs(self, rhs: Var<'t>) -> Var<'t> {
        let (va, vb) = (self.value(), rhs.value());
        assert_eq!(va.shape(), vb.shape(), "cosine_pairs shapes");
        let shape = va.shape().to_vec();
        let d = *shape.last().expect("cosine_pairs needs rank >= 1");
        let rows = va.numel() / d;
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let (ar, br) = (&va.data()[r * d..(r + 1) * d], &vb.data()[r * d..(r + 1) * d]);
            let (la, lb) = (norm(ar), norm(br));
            if la != 0.0 && lb != 0.0 {
                data[r] = dot(ar, br) / (la * lb);
            }
        }
        let out = Tensor::from_parts(shape[..shape.len() - 1].to_vec(), data);
        self.tape.push_op("cosine_pairs", out, &[self, rhs], move |ctx| {
            let (a, b) = (ctx.parents[0].clone(), ctx.parents[1].clone());
            let c = ctx.out_value.data();
            for side in 0..2 {
                if !ctx.grads.needs(side) {
                    continue;
                }
                let dst = ctx.grads.get(side).expect("needs checked");
                for r in 0..rows {
                    let g = ctx.out_grad[r];
                    if g == 0.0 {
                        continue;
                    }
                    let (ar, br) =
                        (&a.data()[r * d..(r + 1) * d], &b.data()[r * d..(r + 1) * d]);
                    let (la, lb) = (norm(ar), norm(br));
                    if la == 0.0 || lb == 0.0 {
                        continue;
                    }
                    let inv = 1.0 / (la * lb);
                    // gradient w.r.t. the chosen side; mirror roles for side 1
                    let (xs, ys, lx) = if side == 0 { (ar, br, la) } else { (br, ar, lb) };
                    for t in 0..d {
                        dst[r * d + t] += g * (ys[t] * inv - c[r] * xs[t] / (lx * lx));
                    }
                }
            }
        })
    }

    // ── Attention helpers ───────────────────────────────────────────────────

    /// Weighted sum over sample points: `v [k, p, d], w [k, p] -> [k, d]`.
    pub fn weighted_point_sum(self, w: Var<'t>) -> Var<'t> {
        let (vv, vw) = (self.value(), w.value());
        let sv = vv.shape();
        assert!(sv.len() == 3, "weighted_point_sum values rank 3");
        let (k, p, d) = (sv[0], sv[1], sv[2]);
        assert_eq!(vw.shape(), &[k, p], "weighted_point_sum weight shape");
        let mut data = vec![0.0; k * d];
        for kk in 0..k {
            for pp in 0..p {
                let c = vw.data()[kk * p + pp];
                if c == 0.0 {
                    continue;
                }
                let vrow = &vv.data()[(kk * p + pp) * d..(kk * p + pp + 1) * d];
                let orow = &mut data[kk * d..(kk + 1) * d];
                for t in 0..d {
                    orow[t] += c * vrow[t];
                }
            }
        }
        let out = Tensor::from_parts(vec![k, d], data);
        self.tape.push_op("weighted_point_sum", out, &[self, w], move |ctx| {
            if ctx.grads.needs(0) {
                let wv = ctx.parents[1].clone();
                let dst = ctx.grads.get(0).expect("needs checked");
                for kk in 0..k {
                    for pp in 0..p {
                        let c = wv.data()[kk * p + pp];
                        if c == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            dst[(kk * p + pp) * d + t] += c * ctx.out_grad[kk * d + t];
                        }
                    }
                }
            }
            if ctx.grads.needs(1) {
                let vv = ctx.parents[0].clone();
                let dst = ctx.grads.get(1).expect("needs checked");
                for kk in 0..k {
                    for pp in 0..p {
                        let mut acc = 0.0;
                        for t in 0..d {
                            acc += vv.data()[(kk * p + pp) * d + t] * ctx.out_grad[kk * d + t];
                        }
                        dst[kk * p + pp] += acc;
                    }
                }
            }
        })
    }

    /// Bilinear sampling of a `[d, h, w]` map at normalised `[s, 2]` (x, y)
    /// locations; samples outside the unit square contribute zero (value and
    /// gradient), and border samples are zero-padded.
    pub fn bilinear_sample(self, coords: Var<'t>) -> Var<'t> {
        let (vf, vc) = (self.value(), coords.value());
        let sf = vf.shape();
        assert!(sf.len() == 3, "bilinear_sample map rank 3");
        let (d, h, w) = (sf[0], sf[1], sf[2]);
        let sc = vc.shape();
        assert!(sc.len() == 2 && sc[1] == 2, "bilinear_sample coords [s, 2]");
        let s = sc[0];
        let mut data = vec![0.0; s * d];
        for si in 0..s {
            let (x, y) = (vc.data()[si * 2], vc.data()[si * 2 + 1]);
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                continue;
            }
            let (px, py) = (x * w as f64 - 0.5, y * h as f64 - 0.5);
            let (x0, y0) = (px.floor() as i64, py.floor() as i64);
            let (fx, fy) = (px - x0 as f64, py - y0 as f64);
            for (dx, dy, wc) in corner_weights(fx, fy) {
                let (xx, yy) = (x0 + dx, y0 + dy);
                if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                    continue;
                }
                let (xx, yy) = (xx as usize, yy as usize);
                for c in 0..d {
                    data[si * d + c] += wc * vf.data()[c * h * w + yy * w + xx];
                }
            }
        }
        let out = Tensor::from_parts(vec![s, d], data);
        self.tape.push_op("bilinear_sample", out, &[self, coords], move |ctx| {
            let f = ctx.parents[0].clone();
            let cv = ctx.parents[1].clone();
            for si in 0..s {
                let (x, y) = (cv.data()[si * 2], cv.data()[si * 2 + 1]);
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    continue;
                }
                let (px, py) = (x * w as f64 - 0.5, y * h as f64 - 0.5);
                let (x0, y0) = (px.floor() as i64, py.floor() as i64);
                let (fx, fy) = (px - x0 as f64, py - y0 as f64);
                if ctx.grads.needs(0) {
                    let dst = ctx.grads.get(0).expect("needs checked");
                    for (dx, dy, wc) in corner_weights(fx, fy) {
                        let (xx, yy) = (x0 + dx, y0 + dy);
                        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                            continue;
                        }
                        let (xx, yy) = (xx as usize, yy as usize);
                        for c in 0..d {
                            dst[c * h * w + yy * w + xx] += wc * ctx.out_grad[si * d + c];
                        }
                    }
                }
                if ctx.grads.needs(1) {
                    // d(out)/d(px) per channel, then chain px = x*w - 0.5.
                    let read = |c: usize, xx: i64, yy: i64| -> f64 {
                        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                            0.0
                        } else {
                            f.data()[c * h * w + yy as usize * w + xx as usize]
                        }
                    };
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for c in 0..d {
                        let g = ctx.out_grad[si * d + c];
                        if g == 0.0 {
                            continue;
                        }
                        let f00 = read(c, x0, y0);
                        let f10 = read(c, x0 + 1, y0);
                        let f01 = read(c, x0, y0 + 1);
                        let f11 = read(c, x0 + 1, y0 + 1);
                        gx += g * ((f10 - f00) * (1.0 - fy) + (f11 - f01) * fy);
                        gy += g * ((f01 - f00) * (1.0 - fx) + (f11 - f10) * fx);
                    }
                    let dst = ctx.grads.get(1).expect("needs checked");
                    dst[si * 2] += gx * w as f64;
                    dst[si * 2 + 1] += gy * h as f64;
                }
            }
        })
    }

    // ── Transposed convolution ──────────────────────────────────────────────

    /// 3D transposed convolution: `x [ci, h, w, z]`, `kernel
    /// [ci, co, kh, kw, kz]`, output `[co, (h-1)sh+kh, (w-1)sw+kw, (z-1)sz+kz]`.
    pub fn conv_transpose3d(self, kernel: Var<'t>, stride: (usize, usize, usize)) -> Var<'t> {
        let (vx, vk) = (self.value(), kernel.value());
        let sx = vx.shape().to_vec();
        let sk = vk.shape().to_vec();
        assert!(sx.len() == 4 && sk.len() == 5, "conv_transpose3d ranks");
        assert_eq!(sx[0], sk[0], "conv_transpose3d channel mismatch");
        let (ci, h, w, z) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw, kz) = (sk[1], sk[2], sk[3], sk[4]);
        let (sh, sw, sz) = stride;
        assert!(sh > 0 && sw > 0 && sz > 0, "conv_transpose3d stride");
        let (oh, ow, oz) = ((h - 1) * sh + kh, (w - 1) * sw + kw, (z - 1) * sz + kz);
        let mut data = vec![0.0; co * oh * ow * oz];
        let xs = strides_for(&[ci, h, w, z]);
        let ks = strides_for(&[ci, co, kh, kw, kz]);
        let os = strides_for(&[co, oh, ow, oz]);
        for cin in 0..ci {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..z {
                        let xv = vx.data()[cin * xs[0] + i * xs[1] + j * xs[2] + k * xs[3]];
                        if xv == 0.0 {
                            continue;
                        }
                        for cout in 0..co {
                            for di in 0..kh {
                                for dj in 0..kw {
                                    for dk in 0..kz {
                                        let kv = vk.data()[cin * ks[0]
                                            + cout * ks[1]
                                            + di * ks[2]
                                            + dj * ks[3]
                                            + dk];
                                        data[cout * os[0]
                                            + (i * sh + di) * os[1]
                                            + (j * sw + dj) * os[2]
                                            + (k * sz + dk)] += xv * kv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![co, oh, ow, oz], data);
        self.tape.push_op("conv_transpose3d", out, &[self, kernel], move |ctx| {
            let (xv, kv) = (ctx.parents[0].clone(), ctx.parents[1].clone());
            if ctx.grads.needs(0) {
                let dst = ctx.grads.get(0).expect("needs checked");
                for cin in 0..ci {
                    for i in 0..h {
                        for j in 0..w {
                            for k in 0..z {
                                let mut acc = 0.0;
                                for cout in 0..co {
                                    for di in 0..kh {
                                        for dj in 0..kw {
                                            for dk in 0..kz {
                                                acc += kv.data()[cin * ks[0]
                                                    + cout * ks[1]
                                                    + di * ks[2]
                                                    + dj * ks[3]
                                                    + dk]
                                                    * ctx.out_grad[cout * os[0]
                                                        + (i * sh + di) * os[1]
                                                        + (j * sw + dj) * os[2]
                                                        + (k * sz + dk)];
                                            }
                                        }
                                    }
                                }
                                dst[cin * xs[0] + i * xs[1] + j * xs[2] + k * xs[3]] += acc;
                            }
                        }
                    }
                }
            }
            if ctx.grads.needs(1) {
                let dst = ctx.grads.get(1).expect("needs checked");
                for cin in 0..ci {
                    for i in 0..h {
                        for j in 0..w {
                            for k in 0..z {
                                let x = xv.data()[cin * xs[0] + i * xs[1] + j * xs[2] + k * xs[3]];
                                if x == 0.0 {
                                    continue;
                                }
                                for cout in 0..co {
                                    for di in 0..kh {
                                        for dj in 0..kw {
                                            for dk in 0..kz {
                                                dst[cin * ks[0]
                                                    + cout * ks[1]
                                                    + di * ks[2]
                                                    + dj * ks[3]
                                                    + dk] += x
                                                    * ctx.out_grad[cout * os[0]
                                                        + (i * sh + di) * os[1]
                                                        + (j * sw + dj) * os[2]
                                                        + (k * sz + dk)];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        })
    }

    /// Stacks equally shaped vars along a new leading axis.
    pub fn stack0(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "stack0 of nothing");
        let tape = parts[0].tape;
        let first = parts[0].value();
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            let v = p.value();
            assert_eq!(v.shape(), first.shape(), "stack0 shape mismatch");
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        let block = first.numel();
        let out = Tensor::from_parts(shape, data);
        tape.push_op("stack0", out, parts, move |ctx| {
            for i in 0..ctx.out_grad.len() / block.max(1) {
                if let Some(d) = ctx.grads.get(i) {
                    for (di, gi) in d.iter_mut().zip(&ctx.out_grad[i * block..(i + 1) * block]) {
                        *di += gi;
                    }
                }
            }
        })
    }
}

// ── Shared helpers ──────────────────────────────────────────────────────────

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn corner_weights(fx: f64, fy: f64) -> [(i64, i64, f64); 4] {
    [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ]
}

/// For each input linear index, the output linear index under `perm`.
fn permutation_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_for(in_shape);
    let out_strides = strides_for(&out_shape);
    let n: usize = in_shape.iter().product();
    let mut map = vec![0usize; n];
    for (lin, m) in map.iter_mut().enumerate() {
        let mut out_lin = 0;
        for (d2, &p) in perm.iter().enumerate() {
            let i = (lin / in_strides[p]) % in_shape[p];
            out_lin += i * out_strides[d2];
        }
        *m = out_lin;
    }
    map
}

/// For each input linear index, the output linear index after reversing `axes`.
fn flip_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let strides = strides_for(shape);
    let n: usize = shape.iter().product();
    let mut map = vec![0usize; n];
    for (lin, m) in map.iter_mut().enumerate() {
        let mut out_lin = 0;
        for (d2, &e) in shape.iter().enumerate() {
            let mut i = (lin / strides[d2]) % e;
            if axes.contains(&d2) {
                i = e - 1 - i;
            }
            out_lin += i * strides[d2];
        }
        *m = out_lin;
    }
    map
}

// ── Tensor-level wrappers (validated, tape-free) ────────────────────────────

/// Temperature softmax over the trailing axis of a plain tensor.
///
/// Fails on non-positive or non-finite `tau`, an empty trailing axis, or
/// non-finite input.
pub fn softmax_with_temperature(x: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!("softmax temperature must be positive, got {tau}")));
    }
    if x.shape().last().copied().unwrap_or(0) == 0 {
        return Err(Error::dim("softmax over empty trailing axis".to_string()));
    }
    if !x.is_finite() {
        return Err(Error::data("softmax input must be finite".to_string()));
    }
    let tape = super::tape::Tape::new();
    Ok(tape.constant(x.clone()).softmax_last(tau).value())
}

/// Paired cosine similarity over the trailing axis of plain tensors;
/// zero-norm inputs yield similarity 0.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "cosine_similarity shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape().is_empty() {
        return Err(Error::dim("cosine_similarity needs rank >= 1".to_string()));
    }
    let tape = super::tape::Tape::new();
    Ok(tape.constant(a.clone()).cosine_pairs(tape.constant(b.clone())).value())
}

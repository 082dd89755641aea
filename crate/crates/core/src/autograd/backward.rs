use super::graph::{gelu_tanh_grad, ChamferKind, Graph, Op, Var};
use super::tensor::{split_axis, Real};
use crate::error::{Error, Result};

struct Grads<T> {
    bufs: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Real> Grads<T> {
    fn buf(&mut self, v: Var) -> &mut [T] {
        let len = self.lens[v.0];
        self.bufs[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn add(&mut self, v: Var, src: &[T]) {
        for (d, &s) in self.buf(v).iter_mut().zip(src) {
            *d = *d + s;
        }
    }
}

impl<T: Real> Graph<T> {
    /// Propagates d(loss)/d(node) back through the tape and adds the result
    /// into the gradient of every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let upto = loss.0 + 1;
        let mut grads = Grads {
            bufs: (0..upto).map(|_| None).collect(),
            lens: self.nodes[..upto].iter().map(|n| n.value.numel()).collect(),
        };
        grads.bufs[loss.0] = Some(vec![T::one()]);

        for i in (0..upto).rev() {
            let Some(gy) = grads.bufs[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let acc = self
                    .leaf_grads
                    .entry(i)
                    .or_insert_with(|| vec![T::zero(); gy.len()]);
                for (a, &g) in acc.iter_mut().zip(&gy) {
                    *a = *a + g;
                }
                continue;
            }
            self.propagate(i, &gy, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut Grads<T>) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                if rg(*a) {
                    let b_data = val(*b).as_ptr();
                    let ga = grads.buf(*a);
                    // ga[m,k] += gy[m,n] * b^T
                    // SAFETY: strides match the row-major extents above.
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            gy.as_ptr(),
                            (n as isize, 1),
                            b_data,
                            (1, n as isize),
                            T::one(),
                            ga.as_mut_ptr(),
                            (k as isize, 1),
                        );
                    }
                }
                if rg(*b) {
                    let a_data = val(*a).as_ptr();
                    let gb = grads.buf(*b);
                    // gb[k,n] += a^T * gy
                    // SAFETY: as above.
                    unsafe {
                        T::gemm(
                            k,
                            m,
                            n,
                            a_data,
                            (1, k as isize),
                            gy.as_ptr(),
                            (n as isize, 1),
                            T::one(),
                            gb.as_mut_ptr(),
                            (n as isize, 1),
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (shp(*a)[0], shp(*a)[1]);
                let ga = grads.buf(*a);
                for ii in 0..r {
                    for j in 0..c {
                        ga[ii * c + j] = ga[ii * c + j] + gy[j * r + ii];
                    }
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    grads.add(*a, gy);
                }
                if rg(*b) {
                    grads.add(*b, gy);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    grads.add(*a, gy);
                }
                if rg(*b) {
                    for (d, &g) in grads.buf(*b).iter_mut().zip(gy) {
                        *d = *d - g;
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bv = val(*b);
                    for ((d, &g), &x) in grads.buf(*a).iter_mut().zip(gy).zip(bv) {
                        *d = *d + g * x;
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    for ((d, &g), &x) in grads.buf(*b).iter_mut().zip(gy).zip(av) {
                        *d = *d + g * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if rg(*a) {
                    grads.add(*a, gy);
                }
                if rg(*row) {
                    let w = shp(*row)[0];
                    let gr = grads.buf(*row);
                    for chunk in gy.chunks(w) {
                        for (d, &g) in gr.iter_mut().zip(chunk) {
                            *d = *d + g;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                for (d, &g) in grads.buf(*a).iter_mut().zip(gy) {
                    *d = *d + g * *s;
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                for ((d, &g), &xv) in grads.buf(*a).iter_mut().zip(gy).zip(x) {
                    *d = *d + g * gelu_tanh_grad(xv);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                for ((d, &g), &xv) in grads.buf(*a).iter_mut().zip(gy).zip(x) {
                    if xv > T::zero() {
                        *d = *d + g;
                    }
                }
            }
            Op::Exp(a) => {
                for ((d, &g), &yv) in grads.buf(*a).iter_mut().zip(gy).zip(y) {
                    *d = *d + g * yv;
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                for ((d, &g), &xv) in grads.buf(*a).iter_mut().zip(gy).zip(x) {
                    *d = *d + g / xv;
                }
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, d, inner) = split_axis(shp(*x), *axis);
                let gx = grads.buf(*x);
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * d + j) * inner + ii;
                        if log {
                            let s = (0..d).map(|j| gy[at(j)]).sum::<T>();
                            for j in 0..d {
                                gx[at(j)] = gx[at(j)] + gy[at(j)] - y[at(j)].exp() * s;
                            }
                        } else {
                            let s = (0..d).map(|j| gy[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..d {
                                gx[at(j)] = gx[at(j)] + y[at(j)] * (gy[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                affine,
                xhat,
                rstd,
            } => {
                let w = *shp(*x).last().unwrap();
                let n = T::from_f64(w as f64);
                let gain = affine.map(|(g, _)| val(g).to_vec());
                if rg(*x) {
                    let gx = grads.buf(*x);
                    let mut gxhat = vec![T::zero(); w];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * w..(r + 1) * w;
                        let (gyr, xh) = (&gy[span.clone()], &xhat[span.clone()]);
                        for j in 0..w {
                            gxhat[j] = match &gain {
                                Some(gv) => gyr[j] * gv[j],
                                None => gyr[j],
                            };
                        }
                        let m1 = gxhat.iter().copied().sum::<T>() / n;
                        let m2 = gxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for (j, dst) in gx[span].iter_mut().enumerate() {
                            *dst = *dst + rs * (gxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some((g, b)) = affine {
                    if rg(*g) {
                        let gg = grads.buf(*g);
                        for (gyr, xh) in gy.chunks(w).zip(xhat.chunks(w)) {
                            for j in 0..w {
                                gg[j] = gg[j] + gyr[j] * xh[j];
                            }
                        }
                    }
                    if rg(*b) {
                        let gb = grads.buf(*b);
                        for gyr in gy.chunks(w) {
                            for j in 0..w {
                                gb[j] = gb[j] + gyr[j];
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let d = shp(x)[*axis];
                    if rg(x) {
                        let gx = grads.buf(x);
                        for o in 0..outer {
                            let src = &gy[(o * total + offset) * inner..][..d * inner];
                            for (dst, &g) in gx[o * d * inner..][..d * inner].iter_mut().zip(src)
                            {
                                *dst = *dst + g;
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, d, inner) = split_axis(shp(*x), *axis);
                let len = node.value.shape()[*axis];
                let gx = grads.buf(*x);
                for o in 0..outer {
                    let dst = &mut gx[(o * d + start) * inner..][..len * inner];
                    for (a, &g) in dst.iter_mut().zip(&gy[o * len * inner..][..len * inner]) {
                        *a = *a + g;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let w = gy.len() / idx.len();
                let gx = grads.buf(*x);
                for (r, &src_row) in idx.iter().enumerate() {
                    for (d, &g) in gx[src_row * w..][..w].iter_mut().zip(&gy[r * w..][..w]) {
                        *d = *d + g;
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, d, inner) = split_axis(shp(*x), *axis);
                let gx = grads.buf(*x);
                for o in 0..outer {
                    for ii in 0..inner {
                        let k = o * inner + ii;
                        let at = (o * d + argmax[k]) * inner + ii;
                        gx[at] = gx[at] + gy[k];
                    }
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, d, inner) = split_axis(shp(*x), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::one() / T::from_f64(d as f64)
                } else {
                    T::one()
                };
                let gx = grads.buf(*x);
                for o in 0..outer {
                    for j in 0..d {
                        let dst = &mut gx[(o * d + j) * inner..][..inner];
                        for (a, &g) in dst.iter_mut().zip(&gy[o * inner..][..inner]) {
                            *a = *a + g * scale;
                        }
                    }
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let n = grads.lens[x.0];
                let g = if matches!(node.op, Op::MeanAll(_)) {
                    gy[0] / T::from_f64(n as f64)
                } else {
                    gy[0]
                };
                for d in grads.buf(*x).iter_mut() {
                    *d = *d + g;
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => grads.add(*x, gy),
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            } => {
                let (rows, c) = (shp(*qkv)[0], shp(*qkv)[1] / 3);
                let (t, dh) = (rows / batch, c / heads);
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let src = val(*qkv);
                let gq = grads.buf(*qkv);
                let (c3, ci, ti) = (3 * c as isize, c as isize, t as isize);
                let mut ds = vec![T::zero(); t * t];
                for b in 0..*batch {
                    for h in 0..*heads {
                        let base = b * t * 3 * c + h * dh;
                        let go = gy[b * t * c + h * dh..].as_ptr();
                        let p = &probs[(b * heads + h) * t * t..][..t * t];
                        // SAFETY: every view stays inside its row-major buffer.
                        unsafe {
                            // dP = dO · Vᵀ
                            T::gemm(t, dh, t, go, (ci, 1), src[base + 2 * c..].as_ptr(), (1, c3), T::zero(), ds.as_mut_ptr(), (ti, 1));
                        }
                        for (drow, prow) in ds.chunks_mut(t).zip(p.chunks(t)) {
                            let dot = drow.iter().zip(prow).map(|(&d, &q)| d * q).sum::<T>();
                            for (d, &q) in drow.iter_mut().zip(prow) {
                                *d = q * (*d - dot) * scale;
                            }
                        }
                        // SAFETY: as above.
                        unsafe {
                            // dQ += dS · K, dK += dSᵀ · Q, dV += Pᵀ · dO
                            T::gemm(t, t, dh, ds.as_ptr(), (ti, 1), src[base + c..].as_ptr(), (c3, 1), T::one(), gq[base..].as_mut_ptr(), (c3, 1));
                            T::gemm(t, t, dh, ds.as_ptr(), (1, ti), src[base..].as_ptr(), (c3, 1), T::one(), gq[base + c..].as_mut_ptr(), (c3, 1));
                            T::gemm(t, t, dh, p.as_ptr(), (1, ti), go, (ci, 1), T::one(), gq[base + 2 * c..].as_mut_ptr(), (c3, 1));
                        }
                    }
                }
            }
            Op::CosineRows { a, b, eps } => {
                let n = shp(*a)[1];
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for (r, &g) in gy.iter().enumerate() {
                    let (x, z) = (&av[r * n..][..n], &bv[r * n..][..n]);
                    let nx = x.iter().map(|&p| p * p).sum::<T>().sqrt();
                    let nz = z.iter().map(|&p| p * p).sum::<T>().sqrt();
                    let denom = nx * nz;
                    if denom < *eps {
                        for j in 0..n {
                            ga[r * n + j] = g * z[j] / *eps;
                            gb[r * n + j] = g * x[j] / *eps;
                        }
                        continue;
                    }
                    let cos = y[r];
                    for j in 0..n {
                        ga[r * n + j] = g * (z[j] / denom - cos * x[j] / (nx * nx));
                        gb[r * n + j] = g * (x[j] / denom - cos * z[j] / (nz * nz));
                    }
                }
                if rg(*a) {
                    grads.add(*a, &ga);
                }
                if rg(*b) {
                    grads.add(*b, &gb);
                }
            }
            Op::CrossEntropyRows { logits, labels } => {
                let v = shp(*logits)[1];
                let x = val(*logits);
                let gx = grads.buf(*logits);
                for (r, (&label, &g)) in labels.iter().zip(gy).enumerate() {
                    let row = &x[r * v..][..v];
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z = row.iter().map(|&l| (l - mx).exp()).sum::<T>();
                    for j in 0..v {
                        let p = (row[j] - mx).exp() / z;
                        let t = if j == label { T::one() } else { T::zero() };
                        gx[r * v + j] = gx[r * v + j] + g * (p - t);
                    }
                }
            }
            Op::Chamfer {
                p,
                g,
                kind,
                p_to_g,
                g_to_p,
            } => {
                let (pv, gv) = (val(*p), val(*g));
                let (np, ng) = (p_to_g.len(), g_to_p.len());
                let mut gp = vec![T::zero(); pv.len()];
                let mut gg = vec![T::zero(); gv.len()];
                // One directed term: mean over `from` of dist(from_i, to_nn(i)).
                let directed = |from: &[T], to: &[T], nn: &[usize], gf: &mut [T], gt: &mut [T]| {
                    let w = gy[0] / T::from_f64(nn.len() as f64);
                    for (ii, &j) in nn.iter().enumerate() {
                        let diff = [
                            from[3 * ii] - to[3 * j],
                            from[3 * ii + 1] - to[3 * j + 1],
                            from[3 * ii + 2] - to[3 * j + 2],
                        ];
                        let coef = match kind {
                            ChamferKind::L2 => T::from_f64(2.0) * w,
                            ChamferKind::L1 => {
                                let d = diff.iter().map(|&c| c * c).sum::<T>().sqrt();
                                if d == T::zero() {
                                    continue;
                                }
                                w / d
                            }
                        };
                        for c in 0..3 {
                            gf[3 * ii + c] = gf[3 * ii + c] + coef * diff[c];
                            gt[3 * j + c] = gt[3 * j + c] - coef * diff[c];
                        }
                    }
                };
                directed(pv, gv, p_to_g, &mut gp, &mut gg);
                directed(gv, pv, g_to_p, &mut gg, &mut gp);
                debug_assert_eq!((np, ng), (pv.len() / 3, gv.len() / 3));
                if rg(*p) {
                    grads.add(*p, &gp);
                }
                if rg(*g) {
                    grads.add(*g, &gg);
                }
            }
        }
    }
}

//! Reverse-mode autodiff over a tape of matrix-level primitives.
//!
//! A `Tape` owns an arena of 2-D f64 buffers. Recording an op computes its
//! forward value eagerly and appends enough context to replay the adjoint.
//! `backward` walks the record once, in reverse, accumulating gradients.
//!
//! Design constraints the op set answers to:
//! - every reduction runs in a fixed order independent of the data, so
//!   repeated runs are bit-identical (a determinism acceptance criterion);
//! - gradients must match central finite differences at 1e-3 relative error,
//!   which rules out fused/reordered math;
//! - buffers are matrices (scalars are 1×1) — rank-general broadcasting is a
//!   non-goal.
//!
//! Hard selection (top-k, query picking, similarity masks) happens *outside*
//! the tape on forward values; those decisions re-enter as constant indices or
//! weights, so they are constants w.r.t. gradients by construction.

pub type BufId = usize;

/// C = alpha·A·B + beta·C over row-major buffers, with strides expressing
/// transposes. Delegates to `matrixmultiply`, which is single-threaded and
/// picks its packing/kernel layout from the shape alone, so results are
/// bit-identical across runs on the same machine.
///
/// Dimensions follow dgemm convention: A is m×k, B is k×n, C is m×n; `rs`/`cs`
/// are the element strides for stepping a row / a column index.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the stride pairs passed by the callers below are always a
    // permutation of the contiguous row-major strides of buffers holding at
    // least m·k / k·n elements, so every access stays in bounds; `c` is a
    // distinct buffer from `a` and `b` (fresh output or a gradient slot).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
struct Buf {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Im2ColMeta {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug)]
enum Op {
    /// out = a · b
    Matmul { a: BufId, b: BufId, out: BufId },
    /// out = a · bᵀ
    MatmulTB { a: BufId, b: BufId, out: BufId },
    /// out[i,:] = a[i,:] + row[0,:]
    AddRow { a: BufId, row: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Div { a: BufId, b: BufId, out: BufId },
    /// out = a * s where s is 1×1
    MulScalar { a: BufId, s: BufId, out: BufId },
    /// Elementwise min; ties give the gradient to `a`.
    MinElem { a: BufId, b: BufId, out: BufId },
    /// Elementwise max; ties give the gradient to `a`.
    MaxElem { a: BufId, b: BufId, out: BufId },
    /// out = mul * a + add; the shift is applied eagerly and does not affect
    /// the gradient, so only the slope is recorded.
    Affine { a: BufId, out: BufId, mul: f64 },
    Relu { a: BufId, out: BufId },
    Sigmoid { a: BufId, out: BufId },
    Softplus { a: BufId, out: BufId },
    /// d√x/dx at x = 0 is taken as 0 (subgradient choice; keeps std(0) finite).
    Sqrt { a: BufId, out: BufId },
    Abs { a: BufId, out: BufId },
    SoftmaxRows { a: BufId, out: BufId },
    SumAll { a: BufId, out: BufId },
    /// out[0,:] = Σ_i weights[i] · a[i,:]; weights are constants.
    WeightedRowSum { a: BufId, out: BufId, weights: Vec<f64> },
    ConcatRows { inputs: Vec<BufId>, out: BufId },
    /// out[r,:] = a[index[r],:]; indices are constants.
    GatherRows { a: BufId, out: BufId, index: Vec<usize> },
    /// Same backing layout, new dims.
    Reshape { a: BufId, out: BufId },
    /// 2-D convolution lowering: patches of a [h·w, cin] grid become rows.
    Im2Col { a: BufId, out: BufId, meta: Im2ColMeta },
}

#[derive(Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
}

/// Per-buffer gradient store produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. buffer `id`, or None if the loss does not depend on it.
    pub fn get(&self, id: BufId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. buffer `id`, zero-filled when the loss is independent.
    pub fn dense(&self, id: BufId, numel: usize) -> Vec<f64> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> BufId {
        debug_assert_eq!(rows * cols, data.len());
        self.bufs.push(Buf { rows, cols, data });
        self.bufs.len() - 1
    }

    /// Register a leaf buffer (parameter or constant input). The tape does not
    /// distinguish the two; callers keep track of which ids are trainable.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> BufId {
        assert_eq!(rows * cols, data.len(), "leaf data length mismatch");
        self.push(rows, cols, data)
    }

    pub fn leaf_tensor(&mut self, t: &crate::numerics::Tensor) -> BufId {
        let (r, c) = t.dims2();
        self.leaf(r, c, t.data.clone())
    }

    pub fn dims(&self, id: BufId) -> (usize, usize) {
        (self.bufs[id].rows, self.bufs[id].cols)
    }

    pub fn value(&self, id: BufId) -> &[f64] {
        &self.bufs[id].data
    }

    /// Scalar value of a 1×1 buffer.
    pub fn scalar_value(&self, id: BufId) -> f64 {
        debug_assert_eq!(self.bufs[id].data.len(), 1);
        self.bufs[id].data[0]
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    // ---- recorded primitives ------------------------------------------------

    pub fn matmul(&mut self, a: BufId, b: BufId) -> BufId {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        {
            let av = &self.bufs[a].data;
            let bv = &self.bufs[b].data;
            gemm(m, k, n, 1.0, av, k as isize, 1, bv, n as isize, 1, 0.0, &mut out);
        }
        let out = self.push(m, n, out);
        self.ops.push(Op::Matmul { a, b, out });
        out
    }

    pub fn matmul_tb(&mut self, a: BufId, b: BufId) -> BufId {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_tb inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        {
            let av = &self.bufs[a].data;
            let bv = &self.bufs[b].data;
            gemm(m, k, n, 1.0, av, k as isize, 1, bv, 1, k as isize, 0.0, &mut out);
        }
        let out = self.push(m, n, out);
        self.ops.push(Op::MatmulTB { a, b, out });
        out
    }

    pub fn add_row(&mut self, a: BufId, row: BufId) -> BufId {
        let (m, n) = self.dims(a);
        let (rr, rc) = self.dims(row);
        assert_eq!((rr, rc), (1, n), "row must be 1×{n}");
        let mut out = self.bufs[a].data.clone();
        {
            let rv = &self.bufs[row].data;
            for i in 0..m {
                for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(rv) {
                    *o += r;
                }
            }
        }
        let out = self.push(m, n, out);
        self.ops.push(Op::AddRow { a, row, out });
        out
    }

    fn binary_elementwise(
        &mut self,
        a: BufId,
        b: BufId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(BufId, BufId, BufId) -> Op,
    ) -> BufId {
        let (m, n) = self.dims(a);
        assert_eq!((m, n), self.dims(b), "elementwise shape mismatch");
        let out: Vec<f64> = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = self.push(m, n, out);
        self.ops.push(make(a, b, out));
        out
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        self.binary_elementwise(a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> BufId {
        self.binary_elementwise(a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> BufId {
        self.binary_elementwise(a, b, |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    pub fn div(&mut self, a: BufId, b: BufId) -> BufId {
        self.binary_elementwise(a, b, |x, y| x / y, |a, b, out| Op::Div { a, b, out })
    }

    pub fn min_elem(&mut self, a: BufId, b: BufId) -> BufId {
        self.binary_elementwise(
            a,
            b,
            |x, y| if x <= y { x } else { y },
            |a, b, out| Op::MinElem { a, b, out },
        )
    }

    pub fn max_elem(&mut self, a: BufId, b: BufId) -> BufId {
        self.binary_elementwise(
            a,
            b,
            |x, y| if x >= y { x } else { y },
            |a, b, out| Op::MaxElem { a, b, out },
        )
    }

    pub fn mul_scalar(&mut self, a: BufId, s: BufId) -> BufId {
        let (m, n) = self.dims(a);
        assert_eq!(self.bufs[s].data.len(), 1, "scalar operand must be 1×1");
        let sv = self.bufs[s].data[0];
        let out: Vec<f64> = self.bufs[a].data.iter().map(|&x| x * sv).collect();
        let out = self.push(m, n, out);
        self.ops.push(Op::MulScalar { a, s, out });
        out
    }

    pub fn affine(&mut self, a: BufId, mul: f64, add: f64) -> BufId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.bufs[a].data.iter().map(|&x| mul * x + add).collect();
        let out = self.push(m, n, out);
        self.ops.push(Op::Affine { a, out, mul });
        out
    }

    pub fn scale(&mut self, a: BufId, mul: f64) -> BufId {
        self.affine(a, mul, 0.0)
    }

    pub fn neg(&mut self, a: BufId) -> BufId {
        self.affine(a, -1.0, 0.0)
    }

    fn unary_elementwise(
        &mut self,
        a: BufId,
        f: impl Fn(f64) -> f64,
        make: impl Fn(BufId, BufId) -> Op,
    ) -> BufId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.bufs[a].data.iter().map(|&x| f(x)).collect();
        let out = self.push(m, n, out);
        self.ops.push(make(a, out));
        out
    }

    pub fn relu(&mut self, a: BufId) -> BufId {
        self.unary_elementwise(a, |x| if x > 0.0 { x } else { 0.0 }, |a, out| Op::Relu { a, out })
    }

    pub fn sigmoid(&mut self, a: BufId) -> BufId {
        self.unary_elementwise(a, sigmoid, |a, out| Op::Sigmoid { a, out })
    }

    /// softplus(x) = ln(1 + eˣ), evaluated in the overflow-safe form.
    pub fn softplus(&mut self, a: BufId) -> BufId {
        self.unary_elementwise(a, softplus, |a, out| Op::Softplus { a, out })
    }

    pub fn sqrt(&mut self, a: BufId) -> BufId {
        self.unary_elementwise(a, f64::sqrt, |a, out| Op::Sqrt { a, out })
    }

    pub fn abs(&mut self, a: BufId) -> BufId {
        self.unary_elementwise(a, f64::abs, |a, out| Op::Abs { a, out })
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: BufId) -> BufId {
        let (m, n) = self.dims(a);
        assert!(n >= 1, "softmax over empty rows");
        let mut out = vec![0.0; m * n];
        {
            let av = &self.bufs[a].data;
            for i in 0..m {
                let row = &av[i * n..(i + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                softmax_into(row, orow);
            }
        }
        let out = self.push(m, n, out);
        self.ops.push(Op::SoftmaxRows { a, out });
        out
    }

    pub fn sum_all(&mut self, a: BufId) -> BufId {
        let mut acc = 0.0;
        for &x in &self.bufs[a].data {
            acc += x;
        }
        let out = self.push(1, 1, vec![acc]);
        self.ops.push(Op::SumAll { a, out });
        out
    }

    pub fn mean_all(&mut self, a: BufId) -> BufId {
        let n = self.bufs[a].data.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Σ_i weights[i]·a[i,:] as a 1×n row. The weights are constants — this is
    /// how masked/average pooling enters the graph without differentiating
    /// through the mask.
    pub fn weighted_row_sum(&mut self, a: BufId, weights: Vec<f64>) -> BufId {
        let (m, n) = self.dims(a);
        assert_eq!(weights.len(), m, "one weight per row");
        let mut out = vec![0.0; n];
        {
            let av = &self.bufs[a].data;
            for (i, &w) in weights.iter().enumerate() {
                if w != 0.0 {
                    for (o, &x) in out.iter_mut().zip(&av[i * n..(i + 1) * n]) {
                        *o += w * x;
                    }
                }
            }
        }
        let out = self.push(1, n, out);
        self.ops.push(Op::WeightedRowSum { a, out, weights });
        out
    }

    /// Arithmetic mean over rows.
    pub fn mean_rows(&mut self, a: BufId) -> BufId {
        let (m, _) = self.dims(a);
        self.weighted_row_sum(a, vec![1.0 / m as f64; m])
    }

    pub fn concat_rows(&mut self, inputs: &[BufId]) -> BufId {
        assert!(!inputs.is_empty(), "concat of nothing");
        let (_, n) = self.dims(inputs[0]);
        let total: usize = inputs.iter().map(|&id| self.dims(id).0).sum();
        let mut out = Vec::with_capacity(total * n);
        for &id in inputs {
            assert_eq!(self.dims(id).1, n, "concat_rows column mismatch");
            out.extend_from_slice(&self.bufs[id].data);
        }
        let out = self.push(total, n, out);
        self.ops.push(Op::ConcatRows { inputs: inputs.to_vec(), out });
        out
    }

    pub fn gather_rows(&mut self, a: BufId, index: &[usize]) -> BufId {
        let (m, n) = self.dims(a);
        let mut out = Vec::with_capacity(index.len() * n);
        for &r in index {
            assert!(r < m, "gather index {r} out of {m} rows");
            out.extend_from_slice(&self.bufs[a].data[r * n..(r + 1) * n]);
        }
        let out = self.push(index.len(), n, out);
        self.ops.push(Op::GatherRows { a, out, index: index.to_vec() });
        out
    }

    pub fn reshape(&mut self, a: BufId, rows: usize, cols: usize) -> BufId {
        let (m, n) = self.dims(a);
        assert_eq!(m * n, rows * cols, "reshape must preserve element count");
        let data = self.bufs[a].data.clone();
        let out = self.push(rows, cols, data);
        self.ops.push(Op::Reshape { a, out });
        out
    }

    /// Lower a [h·w, cin] grid to convolution patch rows [out_h·out_w, k²·cin].
    /// Out-of-bounds taps read zero.
    pub fn im2col(&mut self, a: BufId, meta: Im2ColMeta) -> BufId {
        let (m, n) = self.dims(a);
        assert_eq!(m, meta.height * meta.width, "grid rows mismatch");
        assert_eq!(n, meta.channels, "grid channels mismatch");
        let k = meta.kernel;
        let patch = k * k * meta.channels;
        let mut out = vec![0.0; meta.out_h * meta.out_w * patch];
        {
            let av = &self.bufs[a].data;
            let cin = meta.channels;
            for oy in 0..meta.out_h {
                for ox in 0..meta.out_w {
                    let orow = (oy * meta.out_w + ox) * patch;
                    for ky in 0..k {
                        let iy = (oy * meta.stride + ky) as isize - meta.pad as isize;
                        if iy < 0 || iy >= meta.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * meta.stride + kx) as isize - meta.pad as isize;
                            if ix < 0 || ix >= meta.width as isize {
                                continue;
                            }
                            let src = (iy as usize * meta.width + ix as usize) * cin;
                            let dst = orow + (ky * k + kx) * cin;
                            out[dst..dst + cin].copy_from_slice(&av[src..src + cin]);
                        }
                    }
                }
            }
        }
        let rows = meta.out_h * meta.out_w;
        let out = self.push(rows, patch, out);
        self.ops.push(Op::Im2Col { a, out, meta });
        out
    }

    // ---- reverse sweep -------------------------------------------------------

    /// Reverse-accumulate gradients of the scalar buffer `loss` w.r.t. every
    /// buffer it depends on. Each recorded op is visited exactly once.
    pub fn backward(&self, loss: BufId) -> Gradients {
        assert_eq!(self.bufs[loss].data.len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.bufs.len()];
        grads[loss] = Some(vec![1.0]);

        for op in self.ops.iter().rev() {
            self.replay(op, &mut grads);
        }
        Gradients { grads }
    }

    fn replay(&self, op: &Op, grads: &mut Vec<Option<Vec<f64>>>) {
        // The producing op is visited exactly once, after all consumers of its
        // output, so the output gradient can be taken by value here.
        macro_rules! take_out {
            ($out:expr) => {
                match grads[$out].take() {
                    Some(g) => g,
                    None => return, // loss does not depend on this op
                }
            };
        }
        fn acc<'g>(
            grads: &'g mut Vec<Option<Vec<f64>>>,
            id: BufId,
            numel: usize,
        ) -> &'g mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; numel])
        }

        match op {
            Op::Matmul { a, b, out } => {
                let g = take_out!(*out);
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let av = &self.bufs[*a].data;
                let bv = &self.bufs[*b].data;
                // dA += G · Bᵀ ; dB += Aᵀ · G
                let ga = acc(grads, *a, m * k);
                gemm(m, n, k, 1.0, &g, n as isize, 1, bv, 1, n as isize, 1.0, ga);
                let gb = acc(grads, *b, k * n);
                gemm(k, m, n, 1.0, av, 1, k as isize, &g, n as isize, 1, 1.0, gb);
            }
            Op::MatmulTB { a, b, out } => {
                let g = take_out!(*out);
                let (m, k) = self.dims(*a);
                let (n, _) = self.dims(*b);
                let av = &self.bufs[*a].data;
                let bv = &self.bufs[*b].data;
                // out = A · Bᵀ, so dA += G · B ; dB += Gᵀ · A
                let ga = acc(grads, *a, m * k);
                gemm(m, n, k, 1.0, &g, n as isize, 1, bv, k as isize, 1, 1.0, ga);
                let gb = acc(grads, *b, n * k);
                gemm(n, m, k, 1.0, &g, 1, n as isize, av, k as isize, 1, 1.0, gb);
            }
            Op::AddRow { a, row, out } => {
                let g = take_out!(*out);
                let (m, n) = self.dims(*a);
                {
                    let ga = acc(grads, *a, m * n);
                    for (gg, &gx) in ga.iter_mut().zip(&g) {
                        *gg += gx;
                    }
                }
                let gr = acc(grads, *row, n);
                for i in 0..m {
                    for (gg, &gx) in gr.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *gg += gx;
                    }
                }
            }
            Op::Add { a, b, out } => {
                let g = take_out!(*out);
                let numel = g.len();
                {
                    let ga = acc(grads, *a, numel);
                    for (gg, &gx) in ga.iter_mut().zip(&g) {
                        *gg += gx;
                    }
                }
                let gb = acc(grads, *b, numel);
                for (gg, &gx) in gb.iter_mut().zip(&g) {
                    *gg += gx;
                }
            }
            Op::Sub { a, b, out } => {
                let g = take_out!(*out);
                let numel = g.len();
                {
                    let ga = acc(grads, *a, numel);
                    for (gg, &gx) in ga.iter_mut().zip(&g) {
                        *gg += gx;
                    }
                }
                let gb = acc(grads, *b, numel);
                for (gg, &gx) in gb.iter_mut().zip(&g) {
                    *gg -= gx;
                }
            }
            Op::Mul { a, b, out } => {
                let g = take_out!(*out);
                let numel = g.len();
                let av = self.bufs[*a].data.clone();
                let bv = &self.bufs[*b].data;
                {
                    let ga = acc(grads, *a, numel);
                    for ((gg, &gx), &bx) in ga.iter_mut().zip(&g).zip(bv) {
                        *gg += gx * bx;
                    }
                }
                let gb = acc(grads, *b, numel);
                for ((gg, &gx), &ax) in gb.iter_mut().zip(&g).zip(&av) {
                    *gg += gx * ax;
                }
            }
            Op::Div { a, b, out } => {
                let g = take_out!(*out);
                let numel = g.len();
                let bv = self.bufs[*b].data.clone();
                let ov = &self.bufs[*out].data;
                {
                    let ga = acc(grads, *a, numel);
                    for ((gg, &gx), &bx) in ga.iter_mut().zip(&g).zip(&bv) {
                        *gg += gx / bx;
                    }
                }
                let gb = acc(grads, *b, numel);
                for (((gg, &gx), &bx), &ox) in gb.iter_mut().zip(&g).zip(&bv).zip(ov) {
                    *gg -= gx * ox / bx;
                }
            }
            Op::MulScalar { a, s, out } => {
                let g = take_out!(*out);
                let numel = g.len();
                let sv = self.bufs[*s].data[0];
                let av = &self.bufs[*a].data;
                let mut gs = 0.0;
                for (&gx, &ax) in g.iter().zip(av) {
                    gs += gx * ax;
                }
                {
                    let ga = acc(grads, *a, numel);
                    for (gg, &gx) in ga.iter_mut().zip(&g) {
                        *gg += gx * sv;
                    }
                }
                acc(grads, *s, 1)[0] += gs;
            }
            Op::MinElem { a, b, out } | Op::MaxElem { a, b, out } => {
                let take_a_on = matches!(op, Op::MinElem { .. });
                let g = take_out!(*out);
                let numel = g.len();
                let av = self.bufs[*a].data.clone();
                let bv = self.bufs[*b].data.clone();
                {
                    let ga = acc(grads, *a, numel);
                    for i in 0..numel {
                        let a_wins = if take_a_on { av[i] <= bv[i] } else { av[i] >= bv[i] };
                        if a_wins {
                            ga[i] += g[i];
                        }
                    }
                }
                let gb = acc(grads, *b, numel);
                for i in 0..numel {
                    let a_wins = if take_a_on { av[i] <= bv[i] } else { av[i] >= bv[i] };
                    if !a_wins {
                        gb[i] += g[i];
                    }
                }
            }
            Op::Affine { a, out, mul } => {
                let g = take_out!(*out);
                let ga = acc(grads, *a, g.len());
                for (gg, &gx) in ga.iter_mut().zip(&g) {
                    *gg += mul * gx;
                }
            }
            Op::Relu { a, out } => {
                let g = take_out!(*out);
                let av = &self.bufs[*a].data;
                let numel = g.len();
                let ga = acc(grads, *a, numel);
                for ((gg, &gx), &ax) in ga.iter_mut().zip(&g).zip(av) {
                    if ax > 0.0 {
                        *gg += gx;
                    }
                }
            }
            Op::Sigmoid { a, out } => {
                let g = take_out!(*out);
                let ov = &self.bufs[*out].data;
                let ga = acc(grads, *a, g.len());
                for ((gg, &gx), &y) in ga.iter_mut().zip(&g).zip(ov) {
                    *gg += gx * y * (1.0 - y);
                }
            }
            Op::Softplus { a, out } => {
                let g = take_out!(*out);
                let av = &self.bufs[*a].data;
                let ga = acc(grads, *a, g.len());
                for ((gg, &gx), &x) in ga.iter_mut().zip(&g).zip(av) {
                    *gg += gx * sigmoid(x);
                }
            }
            Op::Sqrt { a, out } => {
                let g = take_out!(*out);
                let ov = &self.bufs[*out].data;
                let ga = acc(grads, *a, g.len());
                for ((gg, &gx), &y) in ga.iter_mut().zip(&g).zip(ov) {
                    if y > 0.0 {
                        *gg += gx * 0.5 / y;
                    }
                }
            }
            Op::Abs { a, out } => {
                let g = take_out!(*out);
                let av = &self.bufs[*a].data;
                let ga = acc(grads, *a, g.len());
                for ((gg, &gx), &x) in ga.iter_mut().zip(&g).zip(av) {
                    *gg += gx * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                }
            }
            Op::SoftmaxRows { a, out } => {
                let g = take_out!(*out);
                let (m, n) = self.dims(*a);
                let ov = &self.bufs[*out].data;
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    let y = &ov[i * n..(i + 1) * n];
                    let gy = &g[i * n..(i + 1) * n];
                    let mut dot = 0.0;
                    for (&gx, &yx) in gy.iter().zip(y) {
                        dot += gx * yx;
                    }
                    for ((gg, &gx), &yx) in
                        ga[i * n..(i + 1) * n].iter_mut().zip(gy).zip(y)
                    {
                        *gg += yx * (gx - dot);
                    }
                }
            }
            Op::SumAll { a, out } => {
                let g = take_out!(*out);
                let (m, n) = self.dims(*a);
                let gx = g[0];
                let ga = acc(grads, *a, m * n);
                for gg in ga.iter_mut() {
                    *gg += gx;
                }
            }
            Op::WeightedRowSum { a, out, weights } => {
                let g = take_out!(*out);
                let (m, n) = self.dims(*a);
                let ga = acc(grads, *a, m * n);
                for (i, &w) in weights.iter().enumerate() {
                    if w != 0.0 {
                        for (gg, &gx) in ga[i * n..(i + 1) * n].iter_mut().zip(&g) {
                            *gg += w * gx;
                        }
                    }
                }
            }
            Op::ConcatRows { inputs, out } => {
                let g = take_out!(*out);
                let (_, n) = self.dims(*out);
                let mut offset = 0;
                for &id in inputs {
                    let (mi, _) = self.dims(id);
                    let gi = acc(grads, id, mi * n);
                    for (gg, &gx) in gi.iter_mut().zip(&g[offset..offset + mi * n]) {
                        *gg += gx;
                    }
                    offset += mi * n;
                }
            }
            Op::GatherRows { a, out, index } => {
                let g = take_out!(*out);
                let (m, n) = self.dims(*a);
                let ga = acc(grads, *a, m * n);
                for (r, &src) in index.iter().enumerate() {
                    for (gg, &gx) in ga[src * n..(src + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                    {
                        *gg += gx;
                    }
                }
            }
            Op::Reshape { a, out } => {
                let g = take_out!(*out);
                let ga = acc(grads, *a, g.len());
                for (gg, &gx) in ga.iter_mut().zip(&g) {
                    *gg += gx;
                }
            }
            Op::Im2Col { a, out, meta } => {
                let g = take_out!(*out);
                let (m, n) = self.dims(*a);
                let k = meta.kernel;
                let patch = k * k * meta.channels;
                let cin = meta.channels;
                let ga = acc(grads, *a, m * n);
                for oy in 0..meta.out_h {
                    for ox in 0..meta.out_w {
                        let orow = (oy * meta.out_w + ox) * patch;
                        for ky in 0..k {
                            let iy = (oy * meta.stride + ky) as isize - meta.pad as isize;
                            if iy < 0 || iy >= meta.height as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * meta.stride + kx) as isize - meta.pad as isize;
                                if ix < 0 || ix >= meta.width as isize {
                                    continue;
                                }
                                let dst = (iy as usize * meta.width + ix as usize) * cin;
                                let src = orow + (ky * k + kx) * cin;
                                for (gg, &gx) in
                                    ga[dst..dst + cin].iter_mut().zip(&g[src..src + cin])
                                {
                                    *gg += gx;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Stable softmax of `row` into `out` (max-subtracted, left-to-right sums).
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

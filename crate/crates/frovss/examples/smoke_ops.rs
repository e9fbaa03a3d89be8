use frovss::tape::*;
use ndarray::Array2;

fn timeit<F: FnMut()>(label: &str, mut f: F) {
    let t = std::time::Instant::now();
    let n = 5;
    for _ in 0..n { f(); }
    println!("{label}: {:?}", t.elapsed() / n);
}

fn main() {
    let items = 24usize; // batch4 x N6
    let d = 8usize;

    // finest refine conv: (items, 64, 64, 8->8)
    let geom = Conv3x3 { batch: items, h: 64, w: 64, cin: d, cout: d, dilation: 1, pad: PadMode::Zero };
    let x = Array2::from_elem((items*4096, d), 0.3);
    let w = Array2::from_elem((9*d, d), 0.01);
    let b = Array2::from_elem((1, d), 0.0);
    timeit("conv64 fwd", || {
        let mut t = Tape::new();
        let xi = t.constant(x.clone());
        let wi = t.constant(w.clone());
        let bi = t.constant(b.clone());
        let _ = t.conv3x3(geom.clone(), xi, wi, bi);
    });
    timeit("conv64 fwd+bwd", || {
        let mut t = Tape::new();
        let xi = t.leaf(x.clone());
        let wi = t.leaf(w.clone());
        let bi = t.leaf(b.clone());
        let y = t.conv3x3(geom.clone(), xi, wi, bi);
        let s = t.sum_all(y);
        t.backward(s);
    });

    // up2x 32->64
    let geom_up = Up2x { batch: items, h: 32, w: 32 };
    let xu = Array2::from_elem((items*1024, d), 0.4);
    timeit("up2x fwd+bwd", || {
        let mut t = Tape::new();
        let xi = t.leaf(xu.clone());
        let y = t.up2x(geom_up.clone(), xi);
        let s = t.sum_all(y);
        t.backward(s);
    });

    // window attention at fusion scale
    let wa = WindowAttention { batch: 4*6*8, h: 8, w: 8, window: 4, heads: 2 };
    let q = Array2::from_elem((wa.token_count(), 8), 0.1);
    timeit("window attn fwd+bwd", || {
        let mut t = Tape::new();
        let qi = t.leaf(q.clone());
        let ki = t.leaf(q.clone());
        let vi = t.leaf(q.clone());
        let y = t.window_attention(wa.clone(), qi, ki, vi);
        let s = t.sum_all(y);
        t.backward(s);
    });

    // gather of the big permutation
    let big = Array2::from_elem((items*4096, d), 0.2);
    let idx: Vec<usize> = (0..items*4096).rev().collect();
    timeit("gather 98k rows fwd+bwd", || {
        let mut t = Tape::new();
        let xi = t.leaf(big.clone());
        let y = t.gather_rows(xi, idx.clone());
        let s = t.sum_all(y);
        t.backward(s);
    });

    // grouped linear attention at text-guide scale
    let gla = GroupedLinearAttention { groups: 4*64, tokens: 6 };
    let qg = Array2::from_elem((4*64*6, 16), 0.1);
    timeit("lin attn fwd+bwd", || {
        let mut t = Tape::new();
        let qi = t.leaf(qg.clone());
        let ki = t.leaf(qg.clone());
        let vi = t.leaf(qg.clone());
        let y = t.grouped_linear_attention(gla.clone(), qi, ki, vi);
        let s = t.sum_all(y);
        t.backward(s);
    });
}

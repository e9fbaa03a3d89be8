use ndarray::Array2;
fn main() {
    let rows = 98304;
    let a = Array2::<f64>::from_elem((rows, 8), 0.3);
    let w = Array2::<f64>::from_elem((8, 8), 0.01);
    let t = std::time::Instant::now();
    for _ in 0..10 { let _c = a.dot(&w); }
    println!("dgemm [98304,8]x[8,8] x10: {:?}", t.elapsed());

    let a72 = Array2::<f64>::from_elem((rows, 72), 0.3);
    let w72 = Array2::<f64>::from_elem((72, 8), 0.01);
    let t = std::time::Instant::now();
    for _ in 0..10 { let _c = a72.dot(&w72); }
    println!("dgemm [98304,72]x[72,8] x10: {:?}", t.elapsed());

    // manual fused direct conv kernel fwd (zero pad, dil 1)
    let (items, h, w_) = (24usize, 64usize, 64usize);
    let cin = 8usize; let cout = 8usize;
    let x = vec![0.3f64; items*h*w_*cin];
    let wk = vec![0.01f64; 9*cin*cout];
    let mut out = vec![0.0f64; items*h*w_*cout];
    let t = std::time::Instant::now();
    for _ in 0..10 {
        out.iter_mut().for_each(|v| *v = 0.0);
        for it in 0..items {
            let ibase = it*h*w_;
            for y in 0..h {
                for k in 0..9 {
                    let (ky, kx) = (k/3, k%3);
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize { continue; }
                    let dx = kx as isize - 1;
                    let x0 = if dx < 0 {1usize} else {0};
                    let x1 = if dx > 0 {w_-1} else {w_};
                    let wt = &wk[k*cin*cout..(k+1)*cin*cout];
                    for px in x0..x1 {
                        let src = (ibase + sy as usize*w_ + (px as isize + dx) as usize)*cin;
                        let dst = (ibase + y*w_ + px)*cout;
                        let xin = &x[src..src+cin];
                        let o = &mut out[dst..dst+cout];
                        for ci in 0..cin {
                            let b = xin[ci];
                            let wrow = &wt[ci*cout..(ci+1)*cout];
                            for co in 0..cout {
                                o[co] += b*wrow[co];
                            }
                        }
                    }
                }
            }
        }
    }
    println!("manual direct conv fwd x10: {:?}  (sum {})", t.elapsed(), out[0]);
}

use ndarray::{Array2, ShapeBuilder};
fn main() {
    let a: Array2<f64> = Array2::from_elem((4, 6), 1.0);
    let b: Array2<f64> = Array2::from_elem((3, 6), 2.0);
    let c = a.dot(&b.t());
    println!("a.dot(b.t()) standard: {}", c.is_standard_layout());
    let d: Array2<f64> = Array2::from_elem((6, 3), 2.0);
    let e = a.dot(&d);
    println!("a.dot(d) standard: {}", e.is_standard_layout());
    let f = Array2::<f64>::from_elem((1, 4).f(), 3.0);
    println!("1-row f-order standard: {}", f.is_standard_layout());
    // single column matrices after ops
    let g: Array2<f64> = Array2::from_elem((5, 1), 1.0);
    let h = &g + &g;
    println!("col add standard: {}", h.is_standard_layout());
    println!("row of c as_slice: {:?}", c.row(0).as_slice().is_some());
}

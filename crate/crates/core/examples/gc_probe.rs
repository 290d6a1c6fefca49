fn main() {
    let t = std::time::Instant::now();
    let err = nameinv_core::gradcheck::run_model_gradcheck::<f64>(0, 1e-4, 8).unwrap();
    println!("f64 max rel err = {err:.3e} in {:?}", t.elapsed());
    let t = std::time::Instant::now();
    let err32 = nameinv_core::gradcheck::run_model_gradcheck::<f32>(0, 1e-4, 8).unwrap();
    println!("f32 max rel err = {err32:.3e} in {:?}", t.elapsed());
}

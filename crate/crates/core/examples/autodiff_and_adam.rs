//! Fit a hidden 3×3 convolution with the reverse-mode tape: check a few
//! gradient entries against central differences, then train with Adam.

use patchdiff::nn::{AdamConfig, ParamStore, Tape, Tensor};
use patchdiff::rng;

fn loss(store: &ParamStore, x: &Tensor, y: &Tensor) -> patchdiff::Result<(Tape, patchdiff::nn::Var)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let yv = tape.input(y.clone());
    let w = tape.param_from(store, "w")?;
    let b = tape.param_from(store, "b")?;
    let h = tape.conv2d(xv, w, b, 1, 1)?;
    let l = tape.mse_loss(h, yv)?;
    Ok((tape, l))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut r = rng::seeded(3);
    let x = Tensor::new(vec![4, 1, 12, 12], rng::normal_vec(&mut r, 4 * 144))?;
    let kernel = [0.0, 0.125, 0.0, 0.125, 0.5, 0.125, 0.0, 0.125, 0.0];
    let mut truth = ParamStore::new();
    truth.insert("w", Tensor::new(vec![1, 1, 3, 3], kernel.to_vec())?)?;
    truth.insert("b", Tensor::new(vec![1], vec![0.1])?)?;
    let y = {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let w = tape.param_from(&truth, "w")?;
        let b = tape.param_from(&truth, "b")?;
        let h = tape.conv2d(xv, w, b, 1, 1)?;
        tape.value(h).clone()
    };

    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![1, 1, 3, 3], rng::normal_vec(&mut r, 9))?)?;
    store.insert("b", Tensor::zeros(&[1]))?;

    let (tape, l) = loss(&store, &x, &y)?;
    let grads = tape.backward(l, &Tensor::scalar(1.0))?;
    let h = 1e-2;
    for i in [0, 4, 7] {
        let mut plus = store.clone();
        plus.get_mut("w").unwrap().data_mut()[i] += h;
        let mut minus = store.clone();
        minus.get_mut("w").unwrap().data_mut()[i] -= h;
        let f = |s: &ParamStore| -> patchdiff::Result<f64> {
            let (t, l) = loss(s, &x, &y)?;
            Ok(t.value(l).item() as f64)
        };
        let numeric = (f(&plus)? - f(&minus)?) / (2.0 * h as f64);
        println!("dL/dw[{i}]: tape {:+.5} central difference {numeric:+.5}", grads.get("w").unwrap().data()[i]);
    }

    let adam = AdamConfig { lr: 0.05, ..AdamConfig::default() };
    for step in 1..=300 {
        let (tape, l) = loss(&store, &x, &y)?;
        let g = tape.backward(l, &Tensor::scalar(1.0))?;
        store.adam_step(&g, &adam)?;
        if step % 50 == 0 {
            println!("step {step:>3}: loss {:.3e}", tape.value(l).item());
        }
    }
    let w: Vec<String> = store.get("w").unwrap().data().iter().map(|v| format!("{v:.3}")).collect();
    println!("learned kernel [{}], bias {:.3}", w.join(", "), store.get("b").unwrap().data()[0]);
    Ok(())
}

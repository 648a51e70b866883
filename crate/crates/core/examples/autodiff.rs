//! Record a small computation on a tape, differentiate it, compare one
//! coordinate against a central difference, then take an AdamW step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use turngraph::optim::{AdamWConfig, AdamWState};
use turngraph::params::ParamStore;
use turngraph::tape::Tape;
use turngraph::tensor::{init_params, Init, Tensor};

fn loss(store: &ParamStore, x: &Tensor) -> turngraph::Result<(f64, turngraph::tape::Gradients)> {
    let mut tape = Tape::new(store);
    let w = tape.param(store.ids().next().unwrap());
    let x = tape.constant(x.clone());
    let h = tape.matmul(x, w)?;
    let h = tape.tanh(h);
    let p = tape.softmax_rows(h);
    let ph = tape.mul(p, h)?;
    let l = tape.mean(ph)?;
    let value = tape.value(l).item();
    Ok((value, tape.backward(l)?))
}

fn main() -> turngraph::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let w = store.add("w", init_params(3, 4, Init::GlorotUniform, &mut rng));
    let x = Tensor::new(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.2, -0.3])?;

    let (value, grads) = loss(&store, &x)?;
    let analytic = grads.param(w).unwrap().get(1, 2);
    let h = 1e-5;
    let mut plus = store.clone();
    plus.value_mut(w).data_mut()[6] += h;
    let mut minus = store.clone();
    minus.value_mut(w).data_mut()[6] -= h;
    let numeric = (loss(&plus, &x)?.0 - loss(&minus, &x)?.0) / (2.0 * h);
    println!("loss {value:.6}");
    println!("dL/dw[1,2]: tape {analytic:.9}, central difference {numeric:.9}");

    let mut opt = AdamWState::new(AdamWConfig::default());
    store.zero_grad();
    store.accumulate(&grads, 1.0);
    opt.step(&mut store)?;
    println!("after one AdamW step: loss {:.6}", loss(&store, &x)?.0);
    Ok(())
}

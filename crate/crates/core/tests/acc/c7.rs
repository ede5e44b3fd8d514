//! Deterministic DDIM sampling and reconstruction from inferred vs random
//! x_T on the toy autoencoder.

use pdae_core::eval::{mse, pick_indices};
use pdae_core::model::Unguided;
use pdae_core::sampling::{autoencode, sample, Guide, SamplerPlan};
use pdae_core::Tensor;

use super::fixtures::{toy_data, toy_pdae};
use super::{schedule, Outcome};
use crate::tryo;

const STEPS: [usize; 3] = [10, 50, 100];

pub fn run() -> Outcome {
    let s = schedule();
    let data = toy_data();
    let bundle = tryo!(toy_pdae());
    let shape = bundle.spec().item_shape();

    let plan = SamplerPlan::ddim(50, 71);
    let a = tryo!(sample(&Unguided(&bundle), &s, &plan, Guide::Plan, &shape, 8));
    let b = tryo!(sample(&Unguided(&bundle), &s, &plan, Guide::Plan, &shape, 8));
    let x0: Tensor<f64> = data.batch(&pick_indices(data.len(), 32, 72)).cast();
    let ra = tryo!(autoencode(&bundle, &s, &plan, &x0, true));
    let rb = tryo!(autoencode(&bundle, &s, &plan, &x0, true));
    let bitwise = a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        && ra.data().iter().zip(rb.data()).all(|(u, v)| u.to_bits() == v.to_bits());

    let mut inferred = Vec::new();
    let mut random = Vec::new();
    for steps in STEPS {
        let plan = SamplerPlan::ddim(steps, 73);
        inferred.push(tryo!(mse(&tryo!(autoencode(&bundle, &s, &plan, &x0, true)), &x0)));
        random.push(tryo!(mse(&tryo!(autoencode(&bundle, &s, &plan, &x0, false)), &x0)));
    }
    let monotone = inferred.windows(2).all(|w| w[1] < w[0]);
    let ratio = random[2] / inferred[2];
    let table: Vec<String> = STEPS
        .iter()
        .zip(inferred.iter().zip(&random))
        .map(|(n, (i, r))| format!("{n} steps {i:.2e} vs {r:.2e}"))
        .collect();
    Outcome::new(
        bitwise && monotone && ratio >= 10.0,
        format!(
            "repeat runs bitwise {}; MSE inferred vs random x_T: {}; ratio at {} steps {ratio:.1}x",
            if bitwise { "equal" } else { "DIFFERENT" },
            table.join(", "),
            STEPS[2]
        ),
    )
}

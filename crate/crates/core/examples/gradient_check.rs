//! Finite-difference check of the student encoder's gradients under a
//! cross-entropy loss, and of the MI-α bound through a trained-from-scratch
//! critic.

use distiller::losses::{pred_loss_var, PredLossKind, PredTarget};
use distiller::mi::{mi_alpha_bound_var, CriticArch, CriticPair};
use distiller::nn::{check_gradients, EncoderConfig, EncoderModel, HeadKind, ModelInput, Tensor};
use distiller::rng::RngStreams;

fn main() -> distiller::Result<()> {
    let rs = RngStreams::new(3);
    let model = EncoderModel::new(
        EncoderConfig::student(1, 8, 12, 3, HeadKind::Classification),
        &mut rs.stream("init"),
    )?;
    let batch = vec![ModelInput::Tokens(vec![1, 4, 7]), ModelInput::Tokens(vec![2, 2, 9, 11])];
    let labels = PredTarget::Hard(vec![0, 2]);
    let err = check_gradients(
        |g, pv| {
            let out = model.forward(g, pv, &batch)?;
            pred_loss_var(g, PredLossKind::Ce, out.logits, &labels)
        },
        &model.params,
        1e-5,
    )?;
    println!("encoder + CE: max relative error {err:.2e} over {} values", model.params.n_values());

    let critic = CriticPair::new(CriticArch::desk(), 3, 3, &mut rs.stream("critic"))?;
    let mut rng = rs.stream("data");
    let x = Tensor::randn(6, 3, 1.0, &mut rng);
    let y = Tensor::randn(6, 3, 1.0, &mut rng);
    for alpha in [0.0, 0.5, 1.0] {
        let err = check_gradients(
            |g, pv| {
                let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
                let (s, q) = critic.score_graph(g, pv, xv, yv)?;
                mi_alpha_bound_var(g, s, q, alpha)
            },
            &critic.params,
            1e-5,
        )?;
        println!("MI-alpha bound, alpha {alpha}: max relative error {err:.2e}");
    }
    Ok(())
}

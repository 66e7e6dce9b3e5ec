//! The enumeration oracle against Monte Carlo and against itself.

use rws::oracle::{
    bits_of, enumerate_latents, exact_elbo, exact_log_marginal, exact_marginal_gradient,
    exact_posterior, exact_posterior_kl, exact_sleep_gradient, exact_visible_log_probs,
    EnumerationBudget,
};
use rws::training::sleep_q_gradient_into;
use rws::{ModelSpec, RngStream};

fn budget() -> EnumerationBudget {
    EnumerationBudget::default()
}

#[test]
fn sleep_gradient_monte_carlo_converges_to_enumeration() {
    let (p, q) = ModelSpec::parse("SBN/AR-SBN 2-3", 0)
        .unwrap()
        .build(4, None, &mut RngStream::new(1, 0))
        .unwrap();
    let exact = exact_sleep_gradient(&p, &q, &budget()).unwrap();
    let n = 200_000;
    let mut g = q.zero_grad();
    for j in 0..n {
        sleep_q_gradient_into(&p, &q, &mut RngStream::new(2, j), 1.0 / n as f64, &mut g).unwrap();
    }
    for (a, b) in g.iter().zip(exact.iter()) {
        // each per-sample coordinate lies in [-1, 1], so 4 SE ≤ 4 / √n
        assert!((a - b).abs() < 4.0 / (n as f64).sqrt(), "{a} vs {b}");
    }
}

#[test]
fn elbo_and_posterior_kl_match_direct_sums() {
    let (p, q) = ModelSpec::parse("SBN/NADE 3", 4)
        .unwrap()
        .build(5, None, &mut RngStream::new(3, 0))
        .unwrap();
    for x in [[0, 0, 1, 1, 0], [1, 1, 1, 0, 1]] {
        let post = exact_posterior(&p, &x, &budget()).unwrap();
        let log_px = exact_log_marginal(&p, &x, &budget()).unwrap();
        let (mut kl_q_post, mut kl_post_q) = (0.0, 0.0);
        for h in enumerate_latents(&p.latent_widths()) {
            let lq = q.log_prob(&h, &x).unwrap();
            let lpost = post.log_prob(&h).unwrap();
            kl_q_post += lq.exp() * (lq - lpost);
            kl_post_q += lpost.exp() * (lpost - lq);
        }
        // log p(x) = ELBO + KL(q ‖ posterior)
        assert!((exact_elbo(&p, &q, &x, &budget()).unwrap() + kl_q_post - log_px).abs() < 1e-12);
        assert!((exact_posterior_kl(&p, &q, &x, &budget()).unwrap() - kl_post_q).abs() < 1e-12);
        assert!(kl_post_q > 0.0);
    }
}

#[test]
fn expected_marginal_gradient_vanishes_under_the_model() {
    // Σ_x p(x) ∂ log p(x) = ∂ Σ_x p(x) = 0
    let (p, _) = ModelSpec::parse("AR-SBN/SBN 2-2", 0)
        .unwrap()
        .build(4, None, &mut RngStream::new(4, 0))
        .unwrap();
    let lps = exact_visible_log_probs(&p, &budget()).unwrap();
    let mut total = p.zero_grad();
    for (c, lp) in lps.iter().enumerate() {
        let x = bits_of(c as u64, 4);
        total.add_scaled(
            lp.exp(),
            &exact_marginal_gradient(&p, &x, &budget()).unwrap(),
        );
    }
    assert!(total.iter().all(|v| v.abs() < 1e-12));
}

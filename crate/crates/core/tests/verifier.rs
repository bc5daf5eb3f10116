use cbf_mpc_core::certify::{merge_reports, partition_domain, two_step_gap, verify};
use cbf_mpc_core::scenarios::scenario2;
use cbf_mpc_core::simloop::NoClock;
use cbf_mpc_core::{
    AgentState, CertificateKind, Interval, LumpedState, StateBox, Verdict, VerificationProblem, VerifierOptions,
};

fn problem(gamma_d: f64, bound: f64) -> VerificationProblem {
    VerificationProblem::from_ocp(&scenario2(4, gamma_d).ocp).with_symmetric_bound(bound)
}

fn domain() -> StateBox {
    StateBox::symmetric(Interval::new(-120.0, -40.0), Interval::new(0.0, 14.5))
}

fn grid(b: &StateBox, n: usize) -> impl Iterator<Item = LumpedState> + '_ {
    let at = move |iv: Interval, i: usize| iv.lo + iv.width() * i as f64 / (n - 1) as f64;
    (0..n.pow(4)).map(move |k| {
        let i = [k % n, k / n % n, k / n / n % n, k / n / n / n];
        LumpedState {
            agent1: AgentState {
                s: at(b.dims[0], i[0]),
                v: at(b.dims[1], i[1]),
            },
            agent2: AgentState {
                s: at(b.dims[2], i[2]),
                v: at(b.dims[3], i[3]),
            },
        }
    })
}

#[test]
fn certified_domain_has_no_sampled_violation() {
    let vp = problem(0.6, 5.5);
    let opts = VerifierOptions::default();
    let r = verify(CertificateKind::Qdtcbf, &vp, &domain(), &opts, &NoClock, None).unwrap();
    assert_eq!(r.verdict, Verdict::Certified, "{r:?}");
    for x in grid(&domain(), 17) {
        let g = two_step_gap(&x, &vp);
        if g.admissible(0.0) {
            assert!(g.gap >= -opts.tol, "{x:?} {g:?}");
        }
    }
}

#[test]
fn counterexample_is_genuine() {
    let vp = problem(0.9, 4.8);
    let r = verify(
        CertificateKind::Qdtcbf,
        &vp,
        &domain(),
        &VerifierOptions::default(),
        &NoClock,
        None,
    )
    .unwrap();
    assert_eq!(r.verdict, Verdict::Falsified);
    let x = r.counterexample.unwrap();
    assert!(domain().contains(&x.to_array()));
    let g = two_step_gap(&x, &vp);
    assert!(g.admissible(1e-8) && g.gap < 0.0, "{g:?}");
}

#[test]
fn partitioned_search_agrees_with_whole() {
    let opts = VerifierOptions::default();
    for (gamma_d, bound) in [(0.6, 5.5), (0.9, 4.8)] {
        let vp = problem(gamma_d, bound);
        let whole = verify(CertificateKind::Qdtcbf, &vp, &domain(), &opts, &NoClock, None).unwrap();
        let parts = partition_domain(&domain(), 3);
        assert_eq!(parts[0].dims[0].lo, -120.0);
        assert_eq!(parts[2].dims[0].hi, -40.0);
        let reports = parts
            .iter()
            .map(|b| verify(CertificateKind::Qdtcbf, &vp, b, &opts, &NoClock, None).unwrap())
            .collect();
        let merged = merge_reports(&domain(), reports).unwrap();
        assert_eq!(merged.verdict, whole.verdict);
        assert_eq!(merged.domain, domain());
    }
}

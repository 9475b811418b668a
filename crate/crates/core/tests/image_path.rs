//! Marker images -> estimated flow -> contacts, against the same pipeline fed
//! the true displacement field.

use tactile_core::flowest::{estimate_flow, FlowParams};
use tactile_core::pipeline::{process_frame, PipelineConfig};
use tactile_core::simulator::{render_markers, row_arc_mm, ContactSpec, IndenterSpec, MarkerSet, Skin, DEFAULT_DENSITY};

fn press(arc_mm: f64, fz: f64, d: f64) -> ContactSpec {
    ContactSpec {
        arc_mm,
        force: [0.0, 0.0, -fz],
        indenter: IndenterSpec::new(d),
    }
}

#[test]
fn estimated_flow_locates_contacts_like_true_flow() {
    let skin = Skin::standard().with_noise(0.0);
    let cfg = PipelineConfig::default();
    let markers = MarkerSet::scatter(skin.grid, DEFAULT_DENSITY, 11);
    let reference = render_markers(&markers, None);
    let cases = [
        vec![press(0.0, 3.0, 10.0)],
        vec![press(row_arc_mm(4), 2.5, 5.0)],
        vec![press(-40.0, 3.0, 10.0), press(40.0, 3.0, 10.0)],
    ];
    for contacts in cases {
        let truth = skin.clean_flow(&contacts).unwrap();
        let image = render_markers(&markers, Some(&truth));
        let est = estimate_flow(&reference, &image, &FlowParams::default()).unwrap();
        let a = process_frame(&truth, &cfg, None, 0, 0.0).unwrap();
        let b = process_frame(&est, &cfg, None, 0, 0.0).unwrap();
        assert_eq!(a.len(), contacts.len());
        assert_eq!(b.len(), a.len(), "{contacts:?}");
        for (ea, eb) in a.iter().zip(&b) {
            let d = (ea.raw.x2d - eb.raw.x2d).hypot(ea.raw.y2d - eb.raw.y2d);
            // sparse marker texture jitters the potential minimum by a few px
            assert!(d <= 5.0, "{contacts:?}: {d:.2} px");
        }
    }
}

#[test]
fn sequence_event_count_matches_true_flow() {
    use tactile_core::simulator::{synth_scenario, ScenarioKind, ScenarioParams};
    let skin = Skin::standard().with_noise(0.0);
    let cfg = PipelineConfig::default();
    let markers = MarkerSet::scatter(skin.grid, DEFAULT_DENSITY, 12);
    let reference = render_markers(&markers, None);
    let params = ScenarioParams {
        force_n: 3.0,
        ..ScenarioParams::for_kind(ScenarioKind::TwoPerch)
    };
    let sc = synth_scenario(ScenarioKind::TwoPerch, params, 4).unwrap();
    let (mut n_true, mut n_est) = (0, 0);
    for (k, f) in sc.frames.iter().enumerate().step_by(4) {
        let truth = skin.clean_flow(&f.contacts).unwrap();
        let est = estimate_flow(&reference, &render_markers(&markers, Some(&truth)), &FlowParams::default()).unwrap();
        n_true += process_frame(&truth, &cfg, None, k, f.ts_s).unwrap().len();
        n_est += process_frame(&est, &cfg, None, k, f.ts_s).unwrap().len();
    }
    assert!(n_true > 0);
    let diff = (n_true as f64 - n_est as f64).abs() / n_true as f64;
    assert!(diff <= 0.1, "{n_true} vs {n_est}");
}

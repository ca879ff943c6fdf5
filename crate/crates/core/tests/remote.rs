//! Remote scorer against in-process mock services over TCP.

use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::thread;

use tfgrad::error::Error;
use tfgrad::image::Image;
use tfgrad::optim::{run, sample_view, step, OptimizerState, Prompts, TrainConfig};
use tfgrad::render::{render, CameraPose};
use tfgrad::scorer::protocol::{read_frame, serve, write_frame, Handshake, Header, ScoreRequest, PROTOCOL_VERSION};
use tfgrad::scorer::{score_reference, PromptSet, ReferenceTfScorer, RemoteScorer, Scorer, ViewContext};
use tfgrad::synthetic::{two_shells, two_shells_tf};
use tfgrad::tf::TfParams;

fn handshake() -> Handshake {
    Handshake { model: "mock".into(), input_size: Some(224), temperature: Some(100.0) }
}

/// Serves one connection with `handler` on a background thread.
fn spawn_service<F>(handler: F) -> String
where
    F: FnMut(&ScoreRequest) -> Result<(f64, Vec<f32>), String> + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        let _ = serve(&mut reader, &mut writer, &handshake(), handler);
    });
    format!("tcp://{addr}")
}

/// Sends the handshake, then answers each request with `reply(request)` raw.
/// With `once`, the connection closes after the first reply.
fn spawn_raw<F>(once: bool, mut reply: F) -> String
where
    F: FnMut(&ScoreRequest) -> Vec<u8> + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        write_frame(&mut writer, &handshake().to_header(), &[]).unwrap();
        while let Ok(Some(frame)) = read_frame(&mut reader) {
            let req = ScoreRequest::from_frame(frame).unwrap();
            if writer.write_all(&reply(&req)).is_err() || once {
                break;
            }
        }
    });
    format!("tcp://{addr}")
}

fn context<'a>(bg: &'a Image, prompts: &'a PromptSet) -> ViewContext<'a> {
    ViewContext { step: 3, view: 0, pose: CameraPose::initial(1.0), background: bg, prompts }
}

fn test_image() -> Image {
    Image::from_vec(3, 2, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap()
}

#[test]
fn handshake_and_mse_equivalence() {
    let reference = Image::filled(3, 2, [0.25, 0.5, 0.75]);
    let service_ref = reference.clone();
    let endpoint = spawn_service(move |req| {
        let img = Image::from_vec(req.width, req.height, req.image.iter().map(|&v| v as f64).collect()).map_err(|e| e.to_string())?;
        let r = score_reference(&img, &service_ref).map_err(|e| e.to_string())?;
        Ok((r.loss, r.dloss_dimage.data().iter().map(|&g| g as f32).collect()))
    });
    let mut remote = RemoteScorer::connect(&endpoint).unwrap();
    assert_eq!(remote.handshake(), &handshake());
    assert_eq!(remote.describe(), "remote:mock");

    let image = test_image();
    let bg = Image::new(3, 2);
    let prompts = PromptSet { positive: "a tree".into(), ..Default::default() };
    let local = score_reference(&image, &reference).unwrap();
    for _ in 0..3 {
        let r = remote.score(&context(&bg, &prompts), &image).unwrap();
        assert!((r.loss - local.loss).abs() < 1e-6);
        for (a, b) in r.dloss_dimage.data().iter().zip(local.dloss_dimage.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn prompts_reach_the_service() {
    let (tx, rx) = std::sync::mpsc::channel();
    let endpoint = spawn_service(move |req| {
        tx.send((req.positive.clone(), req.negatives.clone())).unwrap();
        Ok((0.0, vec![0.0; req.image.len()]))
    });
    let mut remote = RemoteScorer::connect(&endpoint).unwrap();
    let prompts = PromptSet {
        positive: "a bonsai".into(),
        user_negatives: vec!["leaves".into()],
        pool_negatives: vec!["a cat".into(), "a car".into()],
    };
    let bg = Image::new(3, 2);
    remote.score(&context(&bg, &prompts), &test_image()).unwrap();
    let (pos, negs) = rx.recv().unwrap();
    assert_eq!(pos, "a bonsai");
    assert_eq!(negs, vec!["a cat", "a car", "leaves"]);
}

#[test]
fn service_errors_and_malformed_replies() {
    let bg = Image::new(3, 2);
    let prompts = PromptSet::default();

    let endpoint = spawn_service(|_| Err("model exploded".into()));
    let mut remote = RemoteScorer::connect(&endpoint).unwrap();
    match remote.score(&context(&bg, &prompts), &test_image()) {
        Err(Error::Scorer(msg)) => assert!(msg.contains("model exploded")),
        other => panic!("unexpected {other:?}"),
    }

    let cases: Vec<(&str, Box<dyn FnMut(&ScoreRequest) -> Vec<u8> + Send>)> = vec![
        ("wrong id", Box::new(|req: &ScoreRequest| {
            reply_bytes(req.id + 1, req.height, req.width, 0.0, vec![0.0; req.image.len()])
        })),
        ("wrong dims", Box::new(|req: &ScoreRequest| reply_bytes(req.id, req.width, req.height, 0.0, vec![0.0; req.image.len()]))),
        ("nan gradient", Box::new(|req: &ScoreRequest| {
            let mut g = vec![0.0; req.image.len()];
            g[1] = f32::NAN;
            reply_bytes(req.id, req.height, req.width, 0.0, g)
        })),
        ("garbage header", Box::new(|_: &ScoreRequest| b"not json\n".to_vec())),
        ("bad version", Box::new(|req: &ScoreRequest| {
            format!("{{\"version\":2,\"id\":{},\"payload_bytes\":0}}\n", req.id).into_bytes()
        })),
        ("short payload", Box::new(|req: &ScoreRequest| {
            let mut b = reply_bytes(req.id, req.height, req.width, 0.0, vec![0.0; req.image.len()]);
            b.truncate(b.len() - 4);
            b
        })),
    ];
    for (name, reply) in cases {
        let endpoint = spawn_raw(true, reply);
        let mut remote = RemoteScorer::connect(&endpoint).unwrap();
        let err = remote.score(&context(&bg, &prompts), &test_image()).unwrap_err();
        match err {
            Error::Protocol { step: Some(3), .. } | Error::NonFinite(_) => {}
            other => panic!("{name}: unexpected {other:?}"),
        }
    }
}

fn reply_bytes(id: u64, height: usize, width: usize, loss: f64, gradient: Vec<f32>) -> Vec<u8> {
    let header = Header {
        version: PROTOCOL_VERSION,
        id: Some(id),
        height: Some(height),
        width: Some(width),
        loss: Some(loss),
        ..Default::default()
    };
    let mut out = Vec::new();
    write_frame(&mut out, &header, &gradient).unwrap();
    out
}

#[test]
fn unknown_endpoint_scheme() {
    assert!(matches!(RemoteScorer::connect("http://localhost:1"), Err(Error::InvalidArgument(_))));
}

#[test]
fn echo_service_gives_prior_and_reg_descent() {
    let field = two_shells(10).unwrap();
    let mut cfg = TrainConfig::new(&field, 6);
    cfg.init.control_points = 4;
    cfg.optim.steps = 3;
    cfg.objective.prior_start = 2;
    let endpoint = spawn_service(|req| Ok((0.0, vec![0.0; req.image.len()])));
    let mut remote = RemoteScorer::connect(&endpoint).unwrap();
    let mut params = TfParams::uniform(4).unwrap();
    params.raw_color = vec![[0.4, -0.3, 0.2]; 4];

    let mut a = OptimizerState::new(params.clone());
    let mut b = OptimizerState::new(params);
    for _ in 0..3 {
        let ra = step(&mut a, &field, &cfg, &Prompts::default(), &mut remote).unwrap();
        assert!(!ra.skipped);
        assert_eq!(ra.l_clip, 0.0);
    }
    // the same steps with an in-process zero scorer
    struct Zero;
    impl Scorer for Zero {
        fn score(&mut self, _: &ViewContext<'_>, image: &Image) -> tfgrad::Result<tfgrad::scorer::ScoreResult> {
            Ok(tfgrad::scorer::ScoreResult { loss: 0.0, dloss_dimage: Image::new(image.width(), image.height()), logits: None })
        }
        fn describe(&self) -> String {
            "zero".into()
        }
    }
    for _ in 0..3 {
        step(&mut b, &field, &cfg, &Prompts::default(), &mut Zero).unwrap();
    }
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, TfParams::uniform(4).unwrap());
}

#[test]
fn scorer_failure_mid_run_is_skipped() {
    let field = two_shells(10).unwrap();
    let mut cfg = TrainConfig::new(&field, 6);
    cfg.init.control_points = 4;
    let endpoint = spawn_raw(false, |req| {
        if req.id == 2 {
            b"{\"version\":1,\"id\":2,\"error\":\"busy\",\"payload_bytes\":0}\n".to_vec()
        } else {
            reply_bytes(req.id, req.height, req.width, 0.0, vec![0.0; req.image.len()])
        }
    });
    let mut remote = RemoteScorer::connect(&endpoint).unwrap();
    let mut state = OptimizerState::new(TfParams::uniform(4).unwrap());
    let r = step(&mut state, &field, &cfg, &Prompts::default(), &mut remote).unwrap();
    assert!(r.skipped);
    assert_eq!(state.params, TfParams::uniform(4).unwrap());
}

/// The reference-TF scorer behind the wire: the service replays the
/// optimizer's deterministic view sequence to know each request's pose.
#[test]
fn protocol_equivalence_on_recovery() {
    let field = two_shells(16).unwrap();
    let gt = two_shells_tf(&field).unwrap();
    let mut cfg = TrainConfig::new(&field, 24);
    cfg.init.control_points = 8;
    cfg.optim.steps = 30;
    cfg.objective.prior_start = 20;
    cfg.objective.gray_steps = 10;

    let mut local = ReferenceTfScorer::new(&field, gt.clone(), cfg.render);
    let local_out = run(&field, &cfg, &Prompts::default(), &mut local, None).unwrap();

    let (svc_field, svc_gt, svc_cfg) = (field.clone(), gt.clone(), cfg.clone());
    let mut counter = 0usize;
    let endpoint = spawn_service(move |req| {
        let (step, view) = (counter / svc_cfg.optim.views_per_step + 1, counter % svc_cfg.optim.views_per_step);
        counter += 1;
        let sample = sample_view(&svc_cfg, svc_field.bounding_radius(), step, view);
        let reference = render(&svc_field, &svc_gt, &sample.pose, &svc_cfg.render, &sample.background).map_err(|e| e.to_string())?.image;
        let img = Image::from_vec(req.width, req.height, req.image.iter().map(|&v| v as f64).collect()).map_err(|e| e.to_string())?;
        let r = score_reference(&img, &reference).map_err(|e| e.to_string())?;
        Ok((r.loss, r.dloss_dimage.data().iter().map(|&g| g as f32).collect()))
    });
    let mut remote = RemoteScorer::connect(&endpoint).unwrap();
    let remote_out = run(&field, &cfg, &Prompts::default(), &mut remote, None).unwrap();

    let pose = CameraPose::new(1.0, 0.1, 3.0 * field.bounding_radius());
    let bg = Image::filled(24, 24, [0.5; 3]);
    let reference = render(&field, &gt, &pose, &cfg.render, &bg).unwrap().image;
    let mse = |tf| render(&field, tf, &pose, &cfg.render, &bg).unwrap().image.mse(&reference).unwrap();
    let (a, b) = (mse(&local_out.tf), mse(&remote_out.tf));
    assert!((a - b).abs() < 1e-6, "in-process {a:e} vs remote {b:e}");
    assert!(remote_out.log.rows.iter().all(|r| !r.skipped));
}

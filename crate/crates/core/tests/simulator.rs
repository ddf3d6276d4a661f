use floe_core::model::{compress_model, forward_token, gen_model, gen_tokens, CompressedModel, ExpertBank, MoeConfig};
use floe_core::offload::{
    min_vram_budget, report_tps, simulate_decode, timeline_csv, ChannelPrefetch, CompactLayout, ComputeModel,
    DecodeTimeline, ExpertPrefetch, SimConfig, TransferModel,
};
use floe_core::predictors::{train_inter, ExpertTrace, InterExpertPredictor, TrainConfig};
use floe_core::quant::QuantConfig;
use floe_core::sparsify::{calibrate, collect_stats};

struct Fixture {
    model: CompressedModel,
    tokens: Vec<Vec<f32>>,
    predictor: InterExpertPredictor,
}

fn fixture(seed: u64) -> Fixture {
    let cfg = MoeConfig {
        layers: 4,
        experts: 8,
        top_k: 2,
        d_hidden: 32,
        d_intermediate: 64,
        seed,
    };
    let dense = gen_model(&cfg).unwrap();
    let calib = gen_tokens(32, 200, seed + 100);
    let (samples, _) = collect_stats(&dense, &calib, 1 << 16, seed).unwrap();
    let table = calibrate(&samples, 0.8).unwrap();
    let model = compress_model(&dense, &table, &QuantConfig::new(4, 64)).unwrap();
    let traces: Vec<_> = calib.iter().map(|x| forward_token(&model, x).unwrap()).collect();
    let tc = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let predictor = train_inter(&ExpertTrace::from_tokens(&traces), 8, 32, 2, &tc).unwrap();
    Fixture {
        model,
        tokens: gen_tokens(32, 12, seed + 200),
        predictor,
    }
}

fn base() -> SimConfig<'static> {
    SimConfig {
        transfer: TransferModel::new(1e9, 5e-6, 10e9, 1).unwrap(),
        layout: CompactLayout::new(2, 8).unwrap(),
        compact: true,
        vram_budget: u64::MAX,
        compute: ComputeModel::new(2e-4, 1e-10).unwrap(),
        experts: ExpertPrefetch::Oracle,
        channels: ChannelPrefetch::Oracle,
        pin_first_layer: true,
    }
}

fn full_model_bytes(f: &Fixture, layout: &CompactLayout) -> u64 {
    let c = f.model.config();
    let e = f.model.expert(0, 0);
    let per = e.up_bytes() + c.d_intermediate as u64 * layout.record_bytes(c.d_hidden);
    per * (c.layers * c.experts) as u64
}

#[test]
fn perfect_prediction_hides_transfers() {
    for seed in [1, 2, 3] {
        let f = fixture(seed);
        let cfg = base();
        let t = simulate_decode(&f.model, &f.tokens, &cfg).unwrap();
        for w in t.layers.windows(2) {
            if w[1].layer > 0 {
                assert!(
                    w[1].transfer_s <= w[0].compute_s,
                    "precondition: transfer fits in compute"
                );
            }
        }
        assert!(t.layers.iter().all(|l| l.stall_s == 0.0 && l.sync_fetch_s == 0.0));
        for (tok, lat) in t.token_latencies.iter().enumerate() {
            let sum: f64 = t.layers.iter().filter(|l| l.token == tok).map(|l| l.compute_s).sum();
            assert_eq!(*lat, sum);
        }
        assert!(t.bytes.balanced());
    }
}

#[test]
fn no_prefetch_is_slower() {
    for seed in [1, 2, 3] {
        let f = fixture(seed);
        let perfect = simulate_decode(&f.model, &f.tokens, &base()).unwrap();
        let none = simulate_decode(
            &f.model,
            &f.tokens,
            &SimConfig {
                experts: ExpertPrefetch::Disabled,
                ..base()
            },
        )
        .unwrap();
        assert!(none.total_s() > perfect.total_s());
        assert_eq!(none.bytes.wasted, 0);
    }
}

#[test]
fn warm_infinite_cache_needs_no_transfer() {
    let f = fixture(4);
    let tokens = vec![f.tokens[0].clone(), f.tokens[0].clone(), f.tokens[0].clone()];
    for experts in [ExpertPrefetch::Disabled, ExpertPrefetch::Oracle] {
        let t = simulate_decode(&f.model, &tokens, &SimConfig { experts, ..base() }).unwrap();
        for l in t.layers.iter().filter(|l| l.token > 0) {
            assert_eq!((l.transfer_s, l.stall_s, l.sync_fetch_s), (0.0, 0.0, 0.0));
        }
        let compute: f64 = t.layers.iter().filter(|l| l.token == 1).map(|l| l.compute_s).sum();
        assert_eq!(t.token_latencies[1], compute);
    }
}

#[test]
fn tps_non_decreasing_in_budget() {
    for seed in [5, 6] {
        let f = fixture(seed);
        let layout = CompactLayout::new(2, 8).unwrap();
        let lo = min_vram_budget(&f.model, &layout, true);
        let hi = full_model_bytes(&f, &layout);
        let modes = [
            (ExpertPrefetch::Oracle, ChannelPrefetch::Reuse),
            (
                ExpertPrefetch::Learned {
                    predictor: &f.predictor,
                    count: 3,
                },
                ChannelPrefetch::Reuse,
            ),
            (ExpertPrefetch::Disabled, ChannelPrefetch::Reuse),
        ];
        for (experts, channels) in modes {
            let mut last = 0.0;
            for step in 0..5u64 {
                let budget = lo + (hi - lo) * step / 4;
                let cfg = SimConfig {
                    vram_budget: budget,
                    experts,
                    channels,
                    ..base()
                };
                let t = simulate_decode(&f.model, &f.tokens, &cfg).unwrap();
                assert!(t.tps() >= last, "budget {budget}: {} < {last}", t.tps());
                last = t.tps();
            }
        }
    }
}

#[test]
fn tps_non_decreasing_in_bandwidth() {
    let f = fixture(7);
    let mut last = 0.0;
    for bw in [1e8, 1e9, 1e10, 1e11] {
        let cfg = SimConfig {
            transfer: TransferModel::new(bw, 5e-6, 10e9, 1).unwrap(),
            experts: ExpertPrefetch::Learned {
                predictor: &f.predictor,
                count: 2,
            },
            channels: ChannelPrefetch::Reuse,
            ..base()
        };
        let tps = simulate_decode(&f.model, &f.tokens, &cfg).unwrap().tps();
        assert!(tps >= last);
        last = tps;
    }
}

#[test]
fn compact_halves_channel_requests() {
    let f = fixture(8);
    let learned = ExpertPrefetch::Learned {
        predictor: &f.predictor,
        count: 3,
    };
    for experts in [ExpertPrefetch::Oracle, ExpertPrefetch::Disabled, learned] {
        let run = |compact| {
            let cfg = SimConfig {
                compact,
                experts,
                channels: ChannelPrefetch::Reuse,
                vram_budget: min_vram_budget(&f.model, &CompactLayout::new(2, 8).unwrap(), true) + 4000,
                ..base()
            };
            simulate_decode(&f.model, &f.tokens, &cfg).unwrap()
        };
        let (c, s) = (run(true), run(false));
        assert!(c.channel_requests > 0);
        assert_eq!(s.channel_requests, 2 * c.channel_requests);
        assert_eq!(s.up_requests, c.up_requests);
        assert_eq!(s.bytes, c.bytes);
    }
}

#[test]
fn bytes_are_conserved() {
    let f = fixture(9);
    let layout = CompactLayout::new(2, 8).unwrap();
    let lo = min_vram_budget(&f.model, &layout, true);
    for budget in [lo, lo + 5000, u64::MAX] {
        for channels in [ChannelPrefetch::Reuse, ChannelPrefetch::Oracle, ChannelPrefetch::Full] {
            let cfg = SimConfig {
                vram_budget: budget,
                experts: ExpertPrefetch::Learned {
                    predictor: &f.predictor,
                    count: 3,
                },
                channels,
                ..base()
            };
            let t = simulate_decode(&f.model, &f.tokens, &cfg).unwrap();
            let b = t.bytes;
            assert_eq!(b.useful + b.cache_hits, b.demanded);
            assert_eq!(b.transferred(), b.useful + b.wasted);
            assert!(b.wasted > 0, "three of eight experts prefetched for two routed");
            // independent demand count from the traces
            let mut demanded = 0u64;
            for x in &f.tokens {
                let tr = forward_token(&f.model, x).unwrap();
                for l in &tr.layers {
                    for a in &l.active {
                        demanded += f.model.expert(0, 0).up_bytes() + a.len() as u64 * layout.record_bytes(32);
                    }
                }
            }
            assert_eq!(b.demanded, demanded);
        }
    }
}

#[test]
fn undersized_budget_is_rejected() {
    let f = fixture(10);
    let layout = CompactLayout::new(2, 8).unwrap();
    for pin in [true, false] {
        let lo = min_vram_budget(&f.model, &layout, pin);
        for budget in [0, lo - 1] {
            let cfg = SimConfig {
                vram_budget: budget,
                pin_first_layer: pin,
                ..base()
            };
            assert!(simulate_decode(&f.model, &f.tokens, &cfg).is_err());
        }
        let cfg = SimConfig {
            vram_budget: lo,
            pin_first_layer: pin,
            ..base()
        };
        assert!(simulate_decode(&f.model, &f.tokens, &cfg).is_ok());
    }
}

#[test]
fn reports_are_deterministic() {
    let f = fixture(11);
    let cfg = SimConfig {
        experts: ExpertPrefetch::Learned {
            predictor: &f.predictor,
            count: 2,
        },
        channels: ChannelPrefetch::Reuse,
        vram_budget: min_vram_budget(&f.model, &CompactLayout::new(2, 8).unwrap(), true) + 10_000,
        ..base()
    };
    let a = simulate_decode(&f.model, &f.tokens, &cfg).unwrap();
    let b = simulate_decode(&f.model, &f.tokens, &cfg).unwrap();
    assert_eq!(timeline_csv(&a), timeline_csv(&b));
    assert_eq!(report_tps(&a).unwrap(), report_tps(&b).unwrap());
}

#[test]
fn tps_report_values() {
    let one = DecodeTimeline {
        layers: Vec::new(),
        token_latencies: vec![0.05],
        bytes: Default::default(),
        up_requests: 0,
        channel_requests: 0,
    };
    let csv = report_tps(&one).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2].parse::<f64>().unwrap(), 20.0);
    let even = DecodeTimeline {
        token_latencies: vec![0.25; 4],
        ..one.clone()
    };
    assert_eq!(even.tps(), 4.0);
    let empty = DecodeTimeline {
        token_latencies: Vec::new(),
        ..one
    };
    assert!(report_tps(&empty).is_err());
}

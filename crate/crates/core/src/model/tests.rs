use super::*;

fn small_arch() -> Architecture {
    Architecture {
        channels: 3,
        hidden: 5,
        kernel: 3,
        temporal_kernel: 3,
        time_embed: 6,
        cond_embed: 4,
        vocab: 3,
    }
}

/// Model with every parameter block (skip gate and biases included) randomized.
fn random_model(arch: Architecture, seed: u64) -> ToyVelocityModel {
    let mut rng = SeededRng::new(seed);
    let params = (0..arch.param_count()).map(|_| 0.4 * rng.normal()).collect();
    ToyVelocityModel::new(arch, params).unwrap()
}

fn random_video(dims: Dims, seed: u64) -> LatentVideo {
    let mut rng = SeededRng::new(seed);
    LatentVideo::from_vec(dims, rng.normal_vec(dims.len())).unwrap()
}

/// Straightforward re-implementation of the forward pass with explicit index arithmetic.
fn naive_forward(model: &ToyVelocityModel, z: &LatentVideo, t: f64, cond: Condition) -> LatentVideo {
    let a = model.architecture();
    let l = a.layout();
    let p = model.params();
    let d = z.dims();
    let (nf, nw, nh) = (d.frames as isize, d.width as isize, d.height as isize);
    let (c, k, ks, kt) = (a.channels, a.hidden, a.kernel, a.temporal_kernel);
    let row = match cond {
        Condition::Null => a.vocab,
        Condition::Label(i) => i as usize,
    };
    let temb = timestep_embedding(t, a.time_embed);
    let emb: Vec<f64> = (0..a.cond_embed)
        .map(|e| p[l.cond_table.start + row * a.cond_embed + e])
        .collect();
    let bias_ranges = [&l.bias1, &l.bias2, &l.bias3, &l.bias4];
    let bias = |layer: usize, j: usize| {
        let mut v = p[bias_ranges[layer].start + j];
        for e in 0..a.time_embed {
            v += p[l.time_proj.start + (layer * k + j) * a.time_embed + e] * temb[e];
        }
        for e in 0..a.cond_embed {
            v += p[l.cond_proj.start + (layer * k + j) * a.cond_embed + e] * emb[e];
        }
        v
    };
    let idx = |f: isize, w: isize, h: isize, ch: usize, n: usize| -> usize {
        (((f * nw + w) * nh + h) as usize) * n + ch
    };
    let spatial = |input: &Vec<f64>, cin: usize, cout: usize, wr: &Range<usize>| {
        let mut out = vec![0.0; d.frames * d.width * d.height * cout];
        let pad = (ks / 2) as isize;
        for f in 0..nf {
            for w in 0..nw {
                for h in 0..nh {
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for dx in 0..ks as isize {
                            for dy in 0..ks as isize {
                                let sw = (w + dx - pad).rem_euclid(nw);
                                let sh = (h + dy - pad).rem_euclid(nh);
                                let tap = (dx * ks as isize + dy) as usize;
                                for i in 0..cin {
                                    acc += p[wr.start + (tap * cout + o) * cin + i]
                                        * input[idx(f, sw, sh, i, cin)];
                                }
                            }
                        }
                        out[idx(f, w, h, o, cout)] = acc;
                    }
                }
            }
        }
        out
    };
    let temporal = |input: &Vec<f64>, wr: &Range<usize>| {
        let mut out = vec![0.0; input.len()];
        let pad = (kt / 2) as isize;
        for f in 0..nf {
            for w in 0..nw {
                for h in 0..nh {
                    for o in 0..k {
                        let mut acc = 0.0;
                        for dt in 0..kt as isize {
                            let sf = f + dt - pad;
                            if sf < 0 || sf >= nf {
                                continue;
                            }
                            for i in 0..k {
                                acc += p[wr.start + (dt as usize * k + o) * k + i]
                                    * input[idx(sf, w, h, i, k)];
                            }
                        }
                        out[idx(f, w, h, o, k)] = acc;
                    }
                }
            }
        }
        out
    };
    let activate = |mut a: Vec<f64>, layer: usize| {
        for (i, v) in a.iter_mut().enumerate() {
            let x = *v + bias(layer, i % k);
            *v = x / (1.0 + (-x).exp());
        }
        a
    };
    let h1 = activate(spatial(&z.data().to_vec(), c, k, &l.conv1), 0);
    let h2 = activate(temporal(&h1, &l.tmix1), 1);
    let h3 = activate(spatial(&h2, k, k, &l.conv2), 2);
    let h4 = activate(temporal(&h3, &l.tmix2), 3);
    let mut out = spatial(&h4, k, c, &l.conv_out);
    for (i, o) in out.iter_mut().enumerate() {
        let ch = i % c;
        let gate: f64 = (0..a.time_embed)
            .map(|e| p[l.skip_gate.start + ch * a.time_embed + e] * temb[e])
            .sum();
        *o += gate * z.data()[i];
    }
    LatentVideo::from_vec(d, out).unwrap()
}

#[test]
fn zero_parameters_give_zero_output() {
    let model = ToyVelocityModel::zeros(small_arch()).unwrap();
    let z = random_video(Dims::new(3, 4, 4, 3).unwrap(), 1);
    let u = model.forward(&z, 0.3, Condition::Label(1)).unwrap();
    assert!(u.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let model = ToyVelocityModel::init(small_arch(), 9).unwrap();
    let z = random_video(Dims::new(3, 4, 4, 3).unwrap(), 2);
    let a = model.forward(&z, 0.5, Condition::Label(0)).unwrap();
    let b = model.forward(&z, 0.5, Condition::Label(0)).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn forward_matches_naive_implementation() {
    let arch = small_arch();
    let model = random_model(arch, 3);
    let z = random_video(Dims::new(4, 6, 6, 3).unwrap(), 4);
    for (t, cond) in [(0.7, Condition::Label(2)), (0.0, Condition::Null), (1.0, Condition::Label(0))] {
        let fast = model.forward(&z, t, cond).unwrap();
        let slow = naive_forward(&model, &z, t, cond);
        assert_eq!(fast.dims(), z.dims());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn shape_and_domain_errors() {
    let model = ToyVelocityModel::init(small_arch(), 1).unwrap();
    let wrong = LatentVideo::zeros(Dims::new(2, 3, 3, 2).unwrap());
    assert!(matches!(model.forward(&wrong, 0.5, Condition::Null), Err(Error::Shape(_))));
    let z = LatentVideo::zeros(Dims::new(2, 3, 3, 3).unwrap());
    assert!(matches!(model.forward(&z, 0.5, Condition::Label(3)), Err(Error::Domain(_))));
    assert!(matches!(model.forward(&z, 1.5, Condition::Null), Err(Error::Domain(_))));
    let g = LatentVideo::zeros(Dims::new(3, 3, 3, 3).unwrap());
    assert!(matches!(model.vjp(&z, 0.5, Condition::Null, &g), Err(Error::Shape(_))));
}

#[test]
fn vjp_of_zero_is_zero() {
    let model = random_model(small_arch(), 5);
    let z = random_video(Dims::new(3, 4, 4, 3).unwrap(), 6);
    let v = model.vjp(&z, 0.4, Condition::Label(1), &LatentVideo::zeros(z.dims())).unwrap();
    assert!(v.data().iter().all(|&x| x == 0.0));
    let pg = model.param_grad(&z, 0.4, Condition::Label(1), &LatentVideo::zeros(z.dims())).unwrap();
    assert!(pg.iter().all(|&x| x == 0.0));
}

#[test]
fn vjp_is_linear_in_cotangent() {
    let model = random_model(small_arch(), 7);
    let dims = Dims::new(3, 4, 4, 3).unwrap();
    let z = random_video(dims, 8);
    let g1 = random_video(dims, 9);
    let g2 = random_video(dims, 10);
    let (a, b) = (0.7, -1.3);
    let combo = g1.lincomb(a, &g2, b).unwrap();
    let lhs = model.vjp(&z, 0.6, Condition::Label(2), &combo).unwrap();
    let r1 = model.vjp(&z, 0.6, Condition::Label(2), &g1).unwrap();
    let r2 = model.vjp(&z, 0.6, Condition::Label(2), &g2).unwrap();
    let rhs = r1.lincomb(a, &r2, b).unwrap();
    assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
}

fn scalar_objective(model: &ToyVelocityModel, z: &LatentVideo, t: f64, cond: Condition, g: &LatentVideo) -> f64 {
    model.forward(z, t, cond).unwrap().dot(g).unwrap()
}

#[test]
fn vjp_matches_central_differences() {
    let dims = Dims::new(3, 4, 4, 2).unwrap();
    let arch = Architecture { channels: 2, ..small_arch() };
    let model = random_model(arch, 11);
    let z = random_video(dims, 12);
    let g = random_video(dims, 13);
    let cond = Condition::Label(1);
    let analytic = model.vjp(&z, 0.35, cond, &g).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..dims.len() {
        let mut zp = z.clone();
        zp.data_mut()[i] += eps;
        let mut zm = z.clone();
        zm.data_mut()[i] -= eps;
        let fd = (scalar_objective(&model, &zp, 0.35, cond, &g) - scalar_objective(&model, &zm, 0.35, cond, &g)) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn directional_vjp_consistency() {
    let model = random_model(small_arch(), 21);
    let dims = Dims::new(3, 4, 4, 3).unwrap();
    for trial in 0..5 {
        let z = random_video(dims, 100 + trial);
        let g = random_video(dims, 200 + trial);
        let g = g.scale(1.0 / g.norm());
        let d = random_video(dims, 300 + trial);
        let d = d.scale(1.0 / d.norm());
        let eps = 1e-5;
        let fp = model.forward(&z.lincomb(1.0, &d, eps).unwrap(), 0.5, Condition::Null).unwrap();
        let fm = model.forward(&z.lincomb(1.0, &d, -eps).unwrap(), 0.5, Condition::Null).unwrap();
        let lhs = g.dot(&fp.sub(&fm).unwrap()).unwrap() / (2.0 * eps);
        let rhs = d.dot(&model.vjp(&z, 0.5, Condition::Null, &g).unwrap()).unwrap();
        assert!((lhs - rhs).abs() <= 1e-4 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn param_grad_matches_central_differences() {
    let arch = small_arch();
    let model = random_model(arch, 31);
    let dims = Dims::new(3, 4, 4, 3).unwrap();
    let z = random_video(dims, 32);
    let g = random_video(dims, 33);
    let cond = Condition::Label(0);
    let grad = model.param_grad(&z, 0.8, cond, &g).unwrap();
    let mut rng = SeededRng::new(34);
    let eps = 1e-5;
    // Make sure every block is probed at least once, then 20 random coordinates.
    let layout = arch.layout();
    let mut coords: Vec<usize> = [
        &layout.conv1, &layout.bias1, &layout.tmix1, &layout.bias2, &layout.conv2, &layout.bias3,
        &layout.tmix2, &layout.bias4, &layout.conv_out, &layout.time_proj, &layout.cond_proj,
        &layout.skip_gate,
    ]
    .iter()
    .map(|r| r.start)
    .collect();
    coords.push(layout.cond_table.start);
    coords.extend((0..20).map(|_| rng.index(layout.total)));
    for i in coords {
        let mut mp = model.clone();
        mp.params_mut()[i] += eps;
        let mut mm = model.clone();
        mm.params_mut()[i] -= eps;
        let fd = (scalar_objective(&mp, &z, 0.8, cond, &g) - scalar_objective(&mm, &z, 0.8, cond, &g)) / (2.0 * eps);
        let a = grad[i];
        let err = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-6);
        assert!(err <= 1e-4 || (fd - a).abs() < 1e-9, "param {i}: analytic {a}, fd {fd}");
    }
}

#[test]
fn param_grad_doubles_with_cotangent() {
    let model = random_model(small_arch(), 41);
    let dims = Dims::new(2, 3, 3, 3).unwrap();
    let z = random_video(dims, 42);
    let g = random_video(dims, 43);
    let a = model.param_grad(&z, 0.2, Condition::Label(2), &g).unwrap();
    let b = model.param_grad(&z, 0.2, Condition::Label(2), &g.scale(2.0)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }
}

#[test]
fn descriptor_round_trip() {
    let arch = Architecture::default();
    assert_eq!(Architecture::from_descriptor(arch.as_descriptor()).unwrap(), arch);
    let mut d = arch.as_descriptor();
    d[2] = 4;
    assert!(Architecture::from_descriptor(d).is_err());
}

use mscos::evaluate::rmse;
use mscos::simulate::{grid_rects, rect_overlaps, rect_support};
use mscos::supports::{build_partition_matrix, diag_ppt, PartitionMatrix};
use proptest::prelude::*;

/// Cut points 0 = c_0 < ... < c_n = 1 from positive widths.
fn cuts(widths: &[f64]) -> Vec<f64> {
    let total: f64 = widths.iter().sum();
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for w in widths {
        acc += w;
        out.push(acc / total);
    }
    *out.last_mut().unwrap() = 1.0;
    out
}

/// Keeps a subset of interior cuts, giving a coarsening of the grid.
fn coarsen(c: &[f64], keep: &[bool]) -> Vec<f64> {
    let mut out = vec![c[0]];
    for (k, &x) in c[1..c.len() - 1].iter().enumerate() {
        if keep[k % keep.len()] {
            out.push(x);
        }
    }
    out.push(*c.last().unwrap());
    out
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|k| format!("{prefix}{k}")).collect()
}

fn nested_partition(xw: &[f64], yw: &[f64], keep: &[bool]) -> (PartitionMatrix, Vec<f64>) {
    let (xc, yc) = (cuts(xw), cuts(yw));
    let fine_rects = grid_rects(&xc, &yc);
    let coarse_rects = grid_rects(&coarsen(&xc, keep), &coarsen(&yc, keep));
    let fine = rect_support(&fine_rects, ids("f", fine_rects.len())).unwrap();
    let coarse = rect_support(&coarse_rects, ids("c", coarse_rects.len())).unwrap();
    let table = rect_overlaps(&coarse_rects, coarse.ids(), &fine_rects, fine.ids()).unwrap();
    (build_partition_matrix(&coarse, &fine, &table).unwrap(), fine.areas().to_vec())
}

proptest! {
    #[test]
    fn nested_grids_give_valid_partition_matrices(
        xw in prop::collection::vec(0.1f64..1.0, 1..6),
        yw in prop::collection::vec(0.1f64..1.0, 1..6),
        keep in prop::collection::vec(any::<bool>(), 1..4),
        y in prop::collection::vec(-5.0f64..5.0, 25),
    ) {
        let (p, areas) = nested_partition(&xw, &yw, &keep);
        let dense = p.to_dense();
        for i in 0..dense.nrows() {
            prop_assert!((dense.row(i).sum() - 1.0).abs() < 1e-9);
        }
        prop_assert!(p.column_nonzeros().iter().all(|&c| c == 1));
        let ppt = &dense * dense.transpose();
        let diag = diag_ppt(&p).unwrap();
        for i in 0..ppt.nrows() {
            prop_assert!((ppt[(i, i)] - diag[i]).abs() < 1e-12);
            for j in 0..ppt.ncols() {
                if i != j {
                    prop_assert!(ppt[(i, j)].abs() < 1e-12);
                }
            }
        }
        // aggregation is the area-weighted mean over member cells
        let y = &y[..p.ncols()];
        let agg = p.apply(y);
        for (i, a) in agg.iter().enumerate() {
            let members = p.row(i);
            let area: f64 = members.iter().map(|&(l, _)| areas[l]).sum();
            let mean = members.iter().map(|&(l, _)| areas[l] * y[l]).sum::<f64>() / area;
            prop_assert!((a - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn rmse_is_a_normalized_metric(
        a in prop::collection::vec(-10.0f64..10.0, 1..30),
        shift in prop::collection::vec(-3.0f64..3.0, 30),
        shift2 in prop::collection::vec(-3.0f64..3.0, 30),
        rot in 0usize..30,
    ) {
        let n = a.len();
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let c: Vec<f64> = b.iter().zip(&shift2).map(|(x, s)| x + s).collect();
        prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let ab = rmse(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - rmse(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(rmse(&a, &c).unwrap() <= ab + rmse(&b, &c).unwrap() + 1e-12);
        let k = rot % n;
        let (mut ar, mut br) = (a.clone(), b.clone());
        ar.rotate_left(k);
        br.rotate_left(k);
        prop_assert!((rmse(&ar, &br).unwrap() - ab).abs() < 1e-12);
    }
}

#[test]
fn rmse_skips_missing_pairs() {
    let t = [1.0, f64::NAN, 3.0];
    let p = [2.0, 100.0, 3.0];
    assert!((rmse(&t, &p).unwrap() - (0.5f64).sqrt()).abs() < 1e-15);
    assert!(rmse(&[f64::NAN], &[1.0]).is_err());
    assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
}

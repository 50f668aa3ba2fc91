use std::collections::BTreeSet;

use nalgebra::Matrix6;
use proptest::prelude::*;
use topomap::spectral::{
    average_node_degree, build_laplacian, fiedler, fiedler_dense, fiedler_inverse_iteration,
    lambda2, WeightedLaplacian, Weighting,
};
use topomap::{Edge, EdgeKind, Pose, PoseGraph, Role, Vertex, VertexId};

fn edges_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize, f64)>)> {
    (2usize..12).prop_flat_map(|m| {
        let e = (0..m, 0..m, 0.1f64..5.0);
        (Just(m), prop::collection::vec(e, 0..30))
    })
}

fn connected(m: usize, edges: &[(usize, usize, f64)]) -> bool {
    let mut seen = vec![false; m];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &(a, b, _) in edges {
            for (x, y) in [(a, b), (b, a)] {
                if x == v && !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
    }
    seen.into_iter().all(|s| s)
}

proptest! {
    #[test]
    fn laplacian_is_symmetric_psd_with_zero_row_sums((m, edges) in edges_strategy()) {
        let l = WeightedLaplacian::from_edges(m, &edges);
        for i in 0..m {
            let row: f64 = (0..m).map(|j| l.get(i, j)).sum();
            prop_assert!(row.abs() <= 1e-12 * l.max_diagonal().max(1.0));
            for j in 0..m {
                prop_assert_eq!(l.get(i, j), l.get(j, i));
            }
        }
        let vals = l.eigenvalues().unwrap();
        prop_assert!(vals[0] >= -1e-9 * l.max_diagonal().max(1.0));
        let mean = vals.iter().sum::<f64>() / m as f64;
        prop_assert!((mean - average_node_degree(&l)).abs() <= 1e-9 * l.max_diagonal().max(1.0));
    }

    #[test]
    fn lambda2_positive_iff_connected((m, edges) in edges_strategy()) {
        let l = WeightedLaplacian::from_edges(m, &edges);
        let real: Vec<_> = edges.iter().copied().filter(|(a, b, _)| a != b).collect();
        prop_assert_eq!(lambda2(&l).unwrap() > 0.0, connected(m, &real));
    }

    #[test]
    fn adding_an_edge_never_lowers_lambda2((m, edges) in edges_strategy(), extra in (0usize..12, 0usize..12, 0.1f64..5.0)) {
        let before = lambda2(&WeightedLaplacian::from_edges(m, &edges)).unwrap();
        let mut more = edges.clone();
        more.push((extra.0 % m, extra.1 % m, extra.2));
        let after = lambda2(&WeightedLaplacian::from_edges(m, &more)).unwrap();
        prop_assert!(after >= before - 1e-9 * before.max(1.0));
    }

    #[test]
    fn fiedler_vector_is_unit_and_centered((m, edges) in edges_strategy()) {
        let l = WeightedLaplacian::from_edges(m, &edges);
        let (_, v) = fiedler(&l).unwrap();
        let n: f64 = v.iter().map(|x| x * x).sum();
        prop_assert!((n - 1.0).abs() < 1e-9);
        prop_assert!(v.iter().sum::<f64>().abs() < 1e-8);
    }

    #[test]
    fn scaling_weights_scales_indices((m, edges) in edges_strategy(), c in 0.01f64..100.0) {
        let l = WeightedLaplacian::from_edges(m, &edges);
        let scaled: Vec<_> = edges.iter().map(|(a, b, w)| (*a, *b, w * c)).collect();
        let ls = WeightedLaplacian::from_edges(m, &scaled);
        let d = average_node_degree(&l);
        prop_assert!((average_node_degree(&ls) - c * d).abs() <= 1e-12 * (c * d).max(1.0));
        let (l2, l2s) = (lambda2(&l).unwrap(), lambda2(&ls).unwrap());
        prop_assert!((l2s - c * l2).abs() <= 1e-9 * (c * l.max_diagonal()).max(1.0));
    }

    #[test]
    fn sparse_and_dense_routes_agree((m, edges) in edges_strategy()) {
        let l = WeightedLaplacian::from_edges(m, &edges);
        let (d, _) = fiedler_dense(&l).unwrap();
        let (s, _) = fiedler_inverse_iteration(&l).unwrap();
        prop_assert!((d - s).abs() <= 1e-8 * l.max_diagonal().max(1.0), "{} vs {}", d, s);
    }
}

#[test]
fn prior_edges_do_not_contribute() {
    let mut g = PoseGraph::new();
    for i in 0..3 {
        g.add_vertex(Vertex::new(VertexId::new(0, i), Pose::identity(), 0.0, Role::Reference))
            .unwrap();
    }
    for i in 0..2 {
        g.add_edge(Edge::new(
            VertexId::new(0, i),
            VertexId::new(0, i + 1),
            EdgeKind::Intra,
            Pose::identity(),
            Matrix6::identity() * 2.0,
        ))
        .unwrap();
    }
    let ids: BTreeSet<_> = g.vertex_ids().collect();
    let without = build_laplacian(&g, &ids, Weighting::FimTrace).unwrap();
    g.add_edge(Edge::prior(VertexId::new(0, 0), Pose::identity(), Matrix6::identity()))
        .unwrap();
    let with = build_laplacian(&g, &ids, Weighting::FimTrace).unwrap();
    assert_eq!(without.row_major(), with.row_major());
    assert_eq!(with.get(1, 1), 24.0);
}

#[test]
fn large_chain_lambda2_matches_closed_form() {
    // path graph P_m: lambda2 = 2 - 2 cos(pi / m)
    let m = 1500;
    let edges: Vec<_> = (0..m - 1).map(|i| (i, i + 1, 1.0)).collect();
    let l = WeightedLaplacian::from_edges(m, &edges);
    let want = 2.0 - 2.0 * (std::f64::consts::PI / m as f64).cos();
    let got = lambda2(&l).unwrap();
    assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
}

use continual_fewshot::data::SampleId;

/// Plain Lloyd's iteration from explicit centres, then the member nearest
/// each centre (lowest id on ties). Written without reference to the
/// library's clustering code.
pub fn brute_force_typical(ids: &[SampleId], points: &[Vec<f64>], init: &[usize]) -> Vec<SampleId> {
    let d2 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum() };
    let mut centres: Vec<Vec<f64>> = init.iter().map(|&i| points[i].clone()).collect();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = 0;
                for c in 1..centres.len() {
                    if d2(p, &centres[c]) < d2(p, &centres[best]) {
                        best = c;
                    }
                }
                best
            })
            .collect();
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&next).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for (k, x) in centre.iter_mut().enumerate() {
                    *x = members.iter().map(|m| m[k]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        if next == labels {
            break;
        }
        labels = next;
    }
    let mut out: Vec<SampleId> = centres
        .iter()
        .enumerate()
        .filter_map(|(c, centre)| {
            (0..points.len())
                .filter(|&i| labels[i] == c)
                .min_by(|&a, &b| {
                    d2(&points[a], centre)
                        .partial_cmp(&d2(&points[b], centre))
                        .unwrap()
                        .then(ids[a].cmp(&ids[b]))
                })
                .map(|i| ids[i])
        })
        .collect();
    out.sort();
    out
}

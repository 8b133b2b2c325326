use lesiontrack::geometry::iou;
use lesiontrack::image::Image;
use lesiontrack::registration::{register, RegistrationConfig};
use lesiontrack::sampling::{extract_search, extract_template, PatchPair, PatchSpec, Variant};
use lesiontrack::tracknet::{decode, Tracker};

fn main() {
    let dir = std::path::Path::new("/tmp/calib/data/test");
    let man = lesiontrack::sampling::read_manifest(&dir.join("manifest.json")).unwrap();
    let spacing = man.spacing_mm;
    let case_id = std::env::args().nth(1).unwrap_or("case0010".into());
    let (ti, si) = (1usize, 0usize);
    let case = man.cases.iter().find(|c| c.id == case_id).unwrap();
    let tps = &case.views[0].timepoints;
    let getb = |i: usize| {
        let b = tps[i].lesion_box;
        b.to_box().unwrap()
    };
    let geti = |i: usize| {
        Image::read_pgm(&dir.join(&tps[i].image))
            .unwrap()
            .with_spacing(spacing)
            .unwrap()
    };
    let (t_img, s_img) = (geti(ti), geti(si));
    let (t_box, s_box) = (getb(ti), getb(si));

    let spec = PatchSpec {
        template_extent_mm: 35.84,
        search_extent_mm: 71.68,
        template_px: 64,
        search_px: 128,
        spacing_mm: 0.56,
    };
    let reg = register(&t_img, &s_img, &RegistrationConfig::default()).unwrap();
    let (mcx, mcy) = reg.transform.apply(t_box.cx, t_box.cy);
    println!(
        "template box ({:.1},{:.1}) mapped center ({mcx:.1},{mcy:.1}) true search center ({:.1},{:.1}) obj {:.4}",
        t_box.cx, t_box.cy, s_box.cx, s_box.cy, reg.objective
    );

    let tracker = Tracker::load(std::path::Path::new("/tmp/calib/run/tracker_e2.json")).unwrap();
    let tf = extract_template(&t_img, &t_box, &spec, Variant::MaskGuided).unwrap();
    let sf = extract_search(&s_img, (mcx, mcy), Some(&s_box), &spec).unwrap();
    let pair = PatchPair::assemble(tf, sf);
    let gt_sp = pair.gt_search_box.clone().unwrap();
    println!("gt in search patch: ({:.1},{:.1}) {:.1}x{:.1}", gt_sp.cx, gt_sp.cy, gt_sp.w, gt_sp.h);

    let maps = tracker.forward(&pair).unwrap();
    let dets = decode(&maps, true, 500).unwrap();
    // score grid
    let m = maps.map_size;
    let stride = 4.0;
    let off = lesiontrack::tracknet::grid_offset(128, m, 4);
    println!("map {m}x{m} offset {off}");
    for r in 0..m {
        let row: String = (0..m)
            .map(|c| {
                let d = dets.iter().find(|d| d.loc == (r, c)).unwrap();
                let ch = b"0123456789"[((d.cls * 9.999) as usize).min(9)] as char;
                ch
            })
            .collect();
        println!("cls {row}");
    }
    // where is gt on the grid?
    let gr = ((gt_sp.cy - off as f64) / stride).round() as usize;
    let gc = ((gt_sp.cx - off as f64) / stride).round() as usize;
    println!("gt grid loc ~ ({gr},{gc})");
    let best = &dets[0];
    println!(
        "best det loc {:?} cls {:.3} ctr {:.3} box ({:.1},{:.1}) {:.1}x{:.1} iou {:.3}",
        best.loc, best.cls, best.ctr, best.bbox.cx, best.bbox.cy, best.bbox.w, best.bbox.h,
        iou(&best.bbox, &gt_sp).unwrap()
    );
    let at_gt = dets
        .iter()
        .filter(|d| (d.loc.0 as i64 - gr as i64).abs() <= 1 && (d.loc.1 as i64 - gc as i64).abs() <= 1)
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .unwrap();
    println!(
        "best near gt: loc {:?} cls {:.3} ctr {:.3} score {:.3} rank {}",
        at_gt.loc, at_gt.cls, at_gt.ctr, at_gt.score,
        dets.iter().position(|d| d.loc == at_gt.loc).unwrap()
    );
}

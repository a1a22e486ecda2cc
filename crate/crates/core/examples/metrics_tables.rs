//! F-measure arithmetic on three reference confusion counts, and the
//! mitotic-count grading scale.

use mitos_rcnn::eval::{metrics, proliferation_grade, write_report, ConfusionCounts};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, tp, fp, fn_) in [("set A", 96, 5, 4), ("set B", 53, 58, 47), ("set C", 72, 31, 28)] {
        let m = metrics(ConfusionCounts { tp, fp, fn_ });
        println!("{:<6} TP {:3} FP {:3} FN {:3}  P {:.3} R {:.3} F1 {:.3}", name, tp, fp, fn_, m.precision, m.recall, m.f1);
    }
    print!("{}", write_report(&metrics(ConfusionCounts { tp: 96, fp: 5, fn_: 4 })));
    for count in [0, 9, 10, 19, 20, 35] {
        println!("{:2} mitoses per 10 HPF -> {:?}", count, proliferation_grade(count)?);
    }
    Ok(())
}

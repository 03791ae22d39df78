fn main() {
    println!("parident");
}

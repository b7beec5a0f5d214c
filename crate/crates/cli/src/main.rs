fn main() {
    println!("latreg");
}
